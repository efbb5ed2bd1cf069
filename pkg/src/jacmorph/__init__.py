"""Jacobian-map morphometry: blended-channel deformable registration and
volume-change quantification with radiomic response prediction."""

__version__ = "0.1.0"

from .errors import (ConfigError, DivergedError, GeometryError, InputError,
                     NotConvergedError, StageError)
from .grid import (BlendConfig, Geometry, Image3D, Mask3D, blend, blend_raw,
                   clip_intensity, downsample, downsample_mask, normalize,
                   resample)
from .jacobian import (CaseMetrics, EvaluationReport, JacobianMap, dice,
                       evaluate_cohort, jacobian_integral_change, jacobian_map)
from .mha import read_image, read_mask, read_mha, write_image, write_mask, write_mha
from .phantom import PhantomCase, PhantomSpec, cohort_specs, make_cohort, make_sphere_phantom
from .pipeline import (ChannelRegistrations, CohortConfig, PipelineConfig,
                       PredictConfig, SweepCell, config_from_dict, config_hash,
                       config_to_dict, load_config, param_sweep, run_pipeline)
from .predict import CVReport, RFModel, cross_validate, rf_train
from .registration import (DeformationField, RegistrationConfig,
                           RegistrationResult, mutual_information,
                           register_bsd, register_ffd, register_pair,
                           rigid_center_align, rigidity_penalty, warp, warp_mask)
from .stats import (CaseTable, UnivariateResult, auc, cluster_distinct,
                    lasso_select, univariate, wilcoxon_rank_sum)
from .texture import (FEATURE_NAMES, FeatureVector, QuantizedROI, extract_all,
                      glcm, glcm_features, glrlm, glrlm_features, quantize)
