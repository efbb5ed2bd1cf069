"""End-to-end phantom study: synthesize → blend → register → Jacobian → predict.

The orchestrator realizes the full workflow on synthetic sphere cohorts:
dual-channel phantom images are blended into a single grayscale volume per
time point, the follow-up is registered to the baseline, the Jacobian map of
the forward field quantifies local volume change, radiomic features of the
map feed the RF-LASSO response model, and every artifact lands in a run
directory (images and fields as .mha, tables as RFC-4180 CSV, reports and the
config-hashed manifest as JSON).

Determinism contract: every output file is byte-reproducible from the config
alone, at any worker count — per-case artifacts are independent files written
by the worker, cohort tables are assembled in case order by the parent, and
nothing records wall-clock time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import sklearn

from . import __version__
from .errors import ConfigError, InputError, StageError
from .grid import BlendConfig, blend
from .jacobian import (dice, evaluate_cohort, jacobian_integral_change,
                       jacobian_map)
from .mha import write_image, write_mask, write_mha
from .phantom import PhantomSpec, cohort_specs, make_sphere_phantom
from .predict import cross_validate
from .registration import RegistrationConfig, register_pair, warp_mask
from .stats import CaseTable
from .texture import FEATURE_NAMES, extract_all

CHANNELS = ("blend", "pet", "ct")
ENGINES = ("bsd", "ffd")

# Channel intensity profiles in normalized units: the anatomy channel is a
# low-contrast sphere (soft tissue against near-tissue background), the
# functional channel a high-uptake sphere on cold background.  With the
# default alpha = 0.2 the blended image lands at 0.71 foreground / 0.09
# background.  Each channel draws its own noise stream (offset from the case
# seed) so channel noise is independent, as it is physically.
_CHANNEL_PROFILES = {
    "ct": {"foreground_intensity": 0.35, "background_intensity": 0.25},
    "pet": {"foreground_intensity": 0.8, "background_intensity": 0.05},
}
_CHANNEL_SEED_OFFSET = {"ct": 1, "pet": 2}


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class CohortConfig:
    """Synthetic cohort layout: size, target change range, and labeling.

    Cases are labeled responder when their true volume change exceeds the
    cohort median, which keeps the classes balanced for the prediction stage;
    a degenerate cohort (all changes equal) yields a single class and the
    prediction stage reports itself skipped.
    """

    n_cases: int = 20
    change_range: tuple[float, float] = (10.0, 80.0)
    seed: int = 7
    dims: tuple[int, int, int] = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "change_range",
                           tuple(float(v) for v in self.change_range))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.dims) != 3:
            raise ConfigError(f"dims must have 3 components, got {self.dims}")


@dataclass(frozen=True)
class ChannelRegistrations:
    """One registration config per image channel.

    The anatomy channel uses a finer coarsest mesh (16 mm vs 32 mm): bony and
    soft-tissue detail supports tighter control spacing, while the smoother
    blended/functional channels need the wider mesh.
    """

    blend: RegistrationConfig = RegistrationConfig()
    pet: RegistrationConfig = RegistrationConfig()
    ct: RegistrationConfig = RegistrationConfig(mesh_spacing_coarsest=16.0)

    def for_channel(self, channel: str) -> RegistrationConfig:
        if channel not in CHANNELS:
            raise ConfigError(f"unknown channel {channel!r}, expected one of {CHANNELS}")
        return getattr(self, channel)


@dataclass(frozen=True)
class PredictConfig:
    """Cross-validation shape for the response model."""

    folds: int = 10
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; the empty config reproduces the published
    defaults (alpha 0.2; mesh 32/32/16 mm; step 0.15; 10x10-fold CV).

    ``rigidity_prepass`` controls the rigidity-penalized deformable
    pre-alignment, applied to blended and functional-channel registrations
    only (the anatomy channel gets a plain rigid initialization).
    """

    cohort: CohortConfig = CohortConfig()
    blend: BlendConfig = BlendConfig()
    channel: str = "blend"
    engine: str = "bsd"
    registration: ChannelRegistrations = ChannelRegistrations()
    rigidity_prepass: bool = True
    n_bins: int = 32
    predict: PredictConfig = PredictConfig()
    out_dir: str = "runs/pipeline"

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ConfigError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins}")
        if not str(self.out_dir):
            raise ConfigError("out_dir must be a nonempty path")


# --------------------------------------------------------------------------- #
# Config serialization (JSON round-trip + hash)
# --------------------------------------------------------------------------- #
_SECTION_TYPES = {
    "cohort": CohortConfig,
    "blend": BlendConfig,
    "predict": PredictConfig,
}


def _dataclass_to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if f.name == "rigidity_mask":
            if value is not None:
                raise ConfigError("rigidity_mask cannot be serialized to JSON; "
                                  "pass it programmatically instead")
            continue
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _dataclass_from_dict(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be a JSON object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known or key == "rigidity_mask":
            raise ConfigError(f"unknown key {key!r} in {context}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Nested plain-dict form of the config, suitable for JSON."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTION_TYPES:
            out[f.name] = _dataclass_to_dict(value)
        elif f.name == "registration":
            out[f.name] = {ch: _dataclass_to_dict(value.for_channel(ch))
                           for ch in CHANNELS}
        else:
            out[f.name] = value
    return out


def config_from_dict(data: dict) -> PipelineConfig:
    """Inverse of :func:`config_to_dict`; unknown keys are an error, missing
    keys take their defaults (so ``{}`` is the published-parameter run)."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    kwargs = {}
    valid = {f.name for f in fields(PipelineConfig)}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in pipeline config")
        if key in _SECTION_TYPES:
            kwargs[key] = _dataclass_from_dict(_SECTION_TYPES[key], value, key)
        elif key == "registration":
            if not isinstance(value, dict):
                raise ConfigError("registration must be a JSON object of channels")
            chans = {}
            for ch, sub in value.items():
                if ch not in CHANNELS:
                    raise ConfigError(f"unknown registration channel {ch!r}")
                chans[ch] = _dataclass_from_dict(RegistrationConfig, sub,
                                                 f"registration.{ch}")
            kwargs[key] = ChannelRegistrations(**chans)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Read a JSON config file; an empty object reproduces the defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 of the canonical config JSON; changes iff any field changes."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- #
# Deterministic writers
# --------------------------------------------------------------------------- #
def write_json(path, obj) -> None:
    payload = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(payload, encoding="utf-8")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# --------------------------------------------------------------------------- #
# Per-case work (runs in worker processes)
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class _CaseTask:
    case_id: str
    spec: PhantomSpec
    config: PipelineConfig


@dataclass(frozen=True)
class _CaseResult:
    case_id: str
    true_change_pct: float
    est_change_pct: float
    dsc: float
    min_jacobian: float
    converged: bool
    features: tuple[float, ...]
    degenerate_roi: bool


def _channel_case(spec: PhantomSpec, channel: str):
    prof = _CHANNEL_PROFILES[channel]
    return make_sphere_phantom(replace(spec, seed=spec.seed + _CHANNEL_SEED_OFFSET[channel],
                                       **prof))


def _case_images(spec: PhantomSpec, cfg: PipelineConfig):
    """Synthesize both channels and return (fixed, moving, masks, gt_pct)."""
    ct = _channel_case(spec, "ct")
    pet = _channel_case(spec, "pet")
    if cfg.channel == "blend":
        fixed = blend(ct.baseline_img, pet.baseline_img, cfg.blend.alpha)
        moving = blend(ct.followup_img, pet.followup_img, cfg.blend.alpha)
    elif cfg.channel == "pet":
        fixed, moving = pet.baseline_img, pet.followup_img
    else:
        fixed, moving = ct.baseline_img, ct.followup_img
    # Masks and ground truth are intensity-independent, identical across channels.
    return fixed, moving, ct.baseline_mask, ct.followup_mask, ct.true_change_pct


def _run_case(task: _CaseTask) -> _CaseResult:
    cfg = task.config
    case_dir = Path(cfg.out_dir) / "cases" / task.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    stage = "synthesize"
    try:
        fixed, moving, base_mask, follow_mask, gt_pct = _case_images(task.spec, cfg)
        write_image(case_dir / f"baseline_{cfg.channel}.mha", fixed)
        write_image(case_dir / f"followup_{cfg.channel}.mha", moving)
        write_mask(case_dir / "baseline_mask.mha", base_mask)
        write_mask(case_dir / "followup_mask.mha", follow_mask)

        stage = "register"
        reg_cfg = cfg.registration.for_channel(cfg.channel)
        prepass = cfg.rigidity_prepass and cfg.channel in ("blend", "pet")
        result = register_pair(fixed, moving, reg_cfg, cfg.engine,
                               fixed_mask=base_mask, moving_mask=follow_mask,
                               rigidity_prepass=prepass)
        for name, fld in (("forward_field", result.forward_field),
                          ("inverse_field", result.inverse_field)):
            write_mha(case_dir / f"{name}.mha", fld.vectors,
                      fld.spacing, fld.origin, "MET_FLOAT")

        stage = "jacobian"
        jmap = jacobian_map(result.forward_field)
        write_image(case_dir / "jacobian.mha", jmap.image)
        est_pct = jacobian_integral_change(jmap, base_mask)
        warped = warp_mask(follow_mask, result.forward_field)
        overlap = dice(base_mask, warped)

        stage = "features"
        fv = extract_all(jmap, base_mask, cfg.n_bins)

        stage = "write"
        write_json(case_dir / "case.json", {
            "case_id": task.case_id,
            "channel": cfg.channel,
            "engine": cfg.engine,
            "true_change_pct": gt_pct,
            "est_change_pct": est_pct,
            "dsc": overlap,
            "min_jacobian": jmap.min(),
            "converged": result.converged,
        })
        return _CaseResult(task.case_id, gt_pct, est_pct, overlap, jmap.min(),
                           result.converged, fv.values, fv.degenerate)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, task.case_id, f"{type(exc).__name__}: {exc}") from exc


# --------------------------------------------------------------------------- #
# Cohort-level stages
# --------------------------------------------------------------------------- #
def _evaluation_dict(results: list[_CaseResult]) -> dict:
    triples = [(r.est_change_pct, r.true_change_pct, r.dsc) for r in results]
    cases = [{"case_id": r.case_id, "est_change_pct": r.est_change_pct,
              "gt_change_pct": r.true_change_pct, "dsc": r.dsc} for r in results]
    dscs = np.asarray([r.dsc for r in results])
    try:
        report = evaluate_cohort(triples)
        return {"cases": cases, "pearson_r": report.pearson_r,
                "mean_abs_diff_pct": report.mean_abs_diff_pct,
                "dsc_mean": report.dsc_mean, "dsc_sd": report.dsc_sd}
    except InputError:
        # Degenerate cohort (identity runs, or too few cases): correlation is
        # undefined; report it as null rather than refusing the whole run.
        est = np.asarray([r.est_change_pct for r in results])
        gt = np.asarray([r.true_change_pct for r in results])
        return {"cases": cases, "pearson_r": None,
                "mean_abs_diff_pct": float(np.abs(est - gt).mean()),
                "dsc_mean": float(dscs.mean()),
                "dsc_sd": float(dscs.std(ddof=1)) if len(dscs) > 1 else 0.0}


def _labels(results: list[_CaseResult]) -> np.ndarray:
    """Responder = true change above the cohort median (balanced by design)."""
    gt = np.asarray([r.true_change_pct for r in results])
    return gt > np.median(gt)


def _prediction_dict(results: list[_CaseResult], cfg: PipelineConfig) -> dict:
    labels = _labels(results)
    n_pos = int(labels.sum())
    if min(n_pos, labels.size - n_pos) < 2:
        return {"skipped": "prediction needs >= 2 cases per class, median split "
                           f"gave {n_pos} responders / {labels.size - n_pos} "
                           "non-responders"}
    table = CaseTable(
        features=np.asarray([r.features for r in results]),
        labels=labels,
        names=FEATURE_NAMES,
        case_ids=tuple(r.case_id for r in results),
    )
    report = cross_validate(table, folds=cfg.predict.folds,
                            repeats=cfg.predict.repeats, seed=cfg.predict.seed)
    return {
        "folds": report.folds,
        "seed": report.seed,
        "mean": report.mean,
        "sd": report.sd,
        "per_repeat": list(report.per_repeat),
        "selection_counts": [[name, count]
                             for name, count in report.selection_counts.items()],
        "accuracy_curve": list(report.accuracy_curve),
        "labels": {r.case_id: bool(l) for r, l in zip(results, labels)},
    }


def _versions() -> dict:
    return {
        "jacmorph": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def run_pipeline(cfg: PipelineConfig, jobs: int = 1,
                 run_prediction: bool = True) -> Path:
    """Run the whole study into ``cfg.out_dir`` and return that directory.

    ``jobs`` bounds case-level parallelism (1 = in-process, sequential);
    outputs are byte-identical at any setting because every worker writes only
    its own case files and the parent assembles cohort tables in case order.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stage = "cohort"
    try:
        specs = [replace(s, dims=cfg.cohort.dims)
                 for s in cohort_specs(cfg.cohort.n_cases, cfg.cohort.change_range,
                                       cfg.cohort.seed)]
    except Exception as exc:
        raise StageError(stage, "-", f"{type(exc).__name__}: {exc}") from exc
    tasks = [_CaseTask(f"case{i:03d}", spec, cfg) for i, spec in enumerate(specs)]

    if jobs == 1:
        results = [_run_case(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_case, tasks))

    stage = "features"
    try:
        rows = [[r.case_id] + [repr(v) for v in r.features] for r in results]
        write_csv(out / "features.csv", ["case_id"] + list(FEATURE_NAMES), rows)
        labels = _labels(results)
        write_csv(out / "labels.csv", ["case_id", "label"],
                  [[r.case_id, int(l)] for r, l in zip(results, labels)])
    except Exception as exc:
        raise StageError(stage, "-", f"{type(exc).__name__}: {exc}") from exc

    stage = "evaluate"
    try:
        write_json(out / "evaluation.json", _evaluation_dict(results))
    except Exception as exc:
        raise StageError(stage, "-", f"{type(exc).__name__}: {exc}") from exc

    stage = "predict"
    try:
        if run_prediction:
            write_json(out / "prediction.json", _prediction_dict(results, cfg))
    except Exception as exc:
        raise StageError(stage, "-", f"{type(exc).__name__}: {exc}") from exc

    stage = "manifest"
    try:
        write_json(out / "manifest.json", {
            "config": config_to_dict(cfg),
            "config_hash": config_hash(cfg),
            "versions": _versions(),
            "case_ids": [r.case_id for r in results],
            "outputs": sorted(str(p.relative_to(out)) for p in out.rglob("*")
                              if p.is_file()),
        })
    except Exception as exc:
        raise StageError(stage, "-", f"{type(exc).__name__}: {exc}") from exc
    return out


# --------------------------------------------------------------------------- #
# Parameter sweep
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SweepCell:
    """Outcome of one (mesh spacing, step size) grid cell."""

    sigma_mm: float
    gamma: float
    mean_dsc: Optional[float]
    pearson_r: Optional[float]
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _cell_config(cfg: PipelineConfig, sigma: float, gamma: float,
                 out_dir: Path) -> PipelineConfig:
    chan_cfg = replace(cfg.registration.for_channel(cfg.channel),
                       mesh_spacing_coarsest=float(sigma), step_size=float(gamma))
    regs = replace(cfg.registration, **{cfg.channel: chan_cfg})
    return replace(cfg, registration=regs, out_dir=str(out_dir))


def _rank_key(cell: SweepCell) -> tuple:
    r = cell.pearson_r if cell.pearson_r is not None else -np.inf
    return (cell.mean_dsc, r)


def param_sweep(cfg: PipelineConfig, sigmas: list[float], gammas: list[float],
                jobs: int = 1) -> tuple[list[SweepCell], Optional[int]]:
    """Grid study over coarsest mesh spacing (mm) and step size.

    Each cell is a full registration+evaluation run in its own subdirectory of
    ``cfg.out_dir``; failures are recorded in the cell and the sweep
    continues.  Returns the cells in row-major (sigma, gamma) order plus the
    index of the best cell by the (mean DSC, then correlation) lexicographic
    rule, and writes ``sweep.csv`` at the sweep root.
    """
    if not sigmas or not gammas:
        raise ConfigError("sweep grids must be nonempty")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells: list[SweepCell] = []
    for sigma in sigmas:
        for gamma in gammas:
            cell_dir = root / f"cell_s{float(sigma):g}_g{float(gamma):g}"
            try:
                sub = _cell_config(cfg, sigma, gamma, cell_dir)
                run_pipeline(sub, jobs=jobs, run_prediction=False)
                with open(cell_dir / "evaluation.json", encoding="utf-8") as fh:
                    ev = json.load(fh)
                cells.append(SweepCell(float(sigma), float(gamma),
                                       ev["dsc_mean"], ev["pearson_r"]))
            except Exception as exc:
                cells.append(SweepCell(float(sigma), float(gamma), None, None,
                                       error=f"{type(exc).__name__}: {exc}"))
    ok = [i for i, c in enumerate(cells) if c.ok and c.mean_dsc is not None]
    best = max(ok, key=lambda i: _rank_key(cells[i]), default=None)
    write_csv(root / "sweep.csv",
              ["sigma_mm", "gamma", "mean_dsc", "pearson_r", "best", "error"],
              [[repr(c.sigma_mm), repr(c.gamma),
                "" if c.mean_dsc is None else repr(c.mean_dsc),
                "" if c.pearson_r is None else repr(c.pearson_r),
                int(i == best), c.error]
               for i, c in enumerate(cells)])
    return cells, best
