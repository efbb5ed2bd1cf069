"""Jacobian-determinant maps of deformation fields and evaluation metrics.

The Jacobian map J(x) = det(I + du/dx) measures local volume change of the
transform x -> x + u(x): J > 1 is expansion, J < 1 shrinkage.  Averaged over
the baseline tumor mask it yields the Jacobian-integral estimate of percent
volume change, which the evaluation compares against ground truth together
with the Dice overlap of the warped masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, InputError
from .grid import Image3D, Mask3D
from .registration import DeformationField


@dataclass(frozen=True)
class JacobianMap:
    """Per-voxel determinant of the transform Jacobian, unitless."""

    image: Image3D

    @property
    def data(self) -> np.ndarray:
        return self.image.data

    @property
    def geometry(self):
        return self.image.geometry

    def min(self) -> float:
        return float(self.image.data.min())


@dataclass(frozen=True)
class CaseMetrics:
    """Evaluation numbers for one registered pair."""

    est_change_pct: float
    gt_change_pct: float
    dsc: float


@dataclass(frozen=True)
class EvaluationReport:
    """Cohort-level evaluation: correlation, mean error, overlap summary."""

    cases: tuple[CaseMetrics, ...]
    pearson_r: float
    mean_abs_diff_pct: float
    dsc_mean: float
    dsc_sd: float


def jacobian_map(field: DeformationField) -> JacobianMap:
    """det(I + du/dx) with the displacement gradient by central differences.

    Differences are taken in physical units (mm) so anisotropic spacing is
    handled; boundary voxels use one-sided differences (numpy.gradient).
    """
    u = field.vectors
    grads = np.empty(field.dims + (3, 3))
    for c in range(3):
        dx, dy, dz = np.gradient(u[..., c], *field.spacing)
        grads[..., c, 0] = dx
        grads[..., c, 1] = dy
        grads[..., c, 2] = dz
    grads[..., 0, 0] += 1.0
    grads[..., 1, 1] += 1.0
    grads[..., 2, 2] += 1.0
    det = np.linalg.det(grads)
    return JacobianMap(Image3D(det, field.spacing, field.origin))


def jacobian_integral_change(jmap: JacobianMap, baseline_mask: Mask3D) -> float:
    """Percent volume change from the mean Jacobian over the baseline mask.

    Returns 100 * (1 - mean J); positive values are shrinkage.
    """
    if jmap.geometry != baseline_mask.geometry:
        raise GeometryError("jacobian map and mask must share geometry")
    sel = baseline_mask.data
    if not sel.any():
        raise InputError("jacobian_integral_change needs a nonempty mask")
    return float(100.0 * (1.0 - jmap.data[sel].mean()))


def dice(a: Mask3D, b: Mask3D) -> float:
    """Dice similarity coefficient 2|A&B| / (|A| + |B|)."""
    if a.geometry != b.geometry:
        raise GeometryError("masks must share geometry for dice")
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na + nb == 0:
        raise InputError("dice of two empty masks is undefined")
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def evaluate_cohort(cases: list[tuple[float, float, float]]) -> EvaluationReport:
    """Summarize (est_change, gt_change, dsc) triples into a cohort report.

    Pearson correlation needs at least 3 cases and nonzero variance in both
    series; the mean absolute difference is in percentage points.
    """
    if len(cases) < 3:
        raise InputError(f"cohort evaluation needs >= 3 cases, got {len(cases)}")
    est = np.asarray([c[0] for c in cases], dtype=np.float64)
    gt = np.asarray([c[1] for c in cases], dtype=np.float64)
    dscs = np.asarray([c[2] for c in cases], dtype=np.float64)
    if np.ptp(est) == 0.0 or np.ptp(gt) == 0.0:
        raise InputError("pearson correlation undefined: a series has zero variance")
    r = float(np.corrcoef(est, gt)[0, 1])
    return EvaluationReport(
        cases=tuple(CaseMetrics(float(e), float(g), float(d))
                    for e, g, d in zip(est, gt, dscs)),
        pearson_r=r,
        mean_abs_diff_pct=float(np.abs(est - gt).mean()),
        dsc_mean=float(dscs.mean()),
        dsc_sd=float(dscs.std(ddof=1)) if len(dscs) > 1 else 0.0,
    )
