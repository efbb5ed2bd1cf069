"""Radiomic feature extraction from a Jacobian map restricted to a mask.

The 56-feature vector is 6 first-order statistics on the raw in-mask values
plus mean and SD, over the 13 unique distance-1 3D offsets, of 14
co-occurrence (GLCM) features and 11 run-length (GLRLM) features:
6 + 2*14 + 2*11 = 56.

Conventions (fixed so the brute-force oracles match exactly):
  - 32 gray levels by default, equal-width bins over the in-mask range; the
    in-mask maximum maps to the top bin.
  - GLCM symmetric (each pair counted in both directions), normalized to
    sum 1; offsets at voxel distance 1.
  - natural-log entropies throughout.
  - runs are maximal same-label segments along a direction, truncated at the
    mask boundary.
A constant region of interest cannot be quantized into more than one level;
it is processed through a single-bin degenerate path and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import InputError
from .grid import Mask3D
from .jacobian import JacobianMap

__all__ = [
    "QuantizedROI", "FeatureVector", "OFFSETS_13", "FEATURE_NAMES",
    "GLCM_FEATURE_NAMES", "GLRLM_FEATURE_NAMES", "quantize", "glcm",
    "glcm_features", "glrlm", "glrlm_features", "extract_all",
]


def _unique_offsets() -> tuple[tuple[int, int, int], ...]:
    """The 13 distance-1 3D offsets, one representative per +/- pair."""
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                d = (dx, dy, dz)
                if d > (0, 0, 0):        # lexicographic: first nonzero is +1
                    offs.append(d)
    return tuple(sorted(offs))


OFFSETS_13 = _unique_offsets()

GLCM_FEATURE_NAMES = (
    "Energy", "Entropy", "Correlation", "Haralick Correlation", "Contrast",
    "Inverse Difference Moment", "Sum Average", "Sum Variance", "Sum Entropy",
    "Difference Variance", "Difference Entropy", "Cluster Shade",
    "Cluster Prominence", "Autocorrelation",
)

GLRLM_FEATURE_NAMES = (
    "Short Run", "Long Run", "Grey Level Nonuniformity",
    "Run Length Nonuniformity", "Run Percentage", "Low Grey Level",
    "High Grey Level", "Short Run Low Grey Level", "Short Run High Grey Level",
    "Long Run Low Grey Level", "Long Run High Grey Level",
)

_FIRST_ORDER_NAMES = ("Mean", "SD", "Skewness", "Kurtosis",
                      "Intensity Energy", "Intensity Entropy")

FEATURE_NAMES: tuple[str, ...] = (
    _FIRST_ORDER_NAMES
    + tuple(f"{agg} {name}" for name in GLCM_FEATURE_NAMES for agg in ("Mean", "SD"))
    + tuple(f"{agg} {name}" for name in GLRLM_FEATURE_NAMES for agg in ("Mean", "SD"))
)
assert len(FEATURE_NAMES) == 56


@dataclass(frozen=True)
class QuantizedROI:
    """Gray-level labels 1..n_bins inside the mask, 0 outside.

    ``degenerate`` marks a constant region of interest, which collapses to a
    single bin (n_bins == 1) because an equal-width grid needs a nonzero
    intensity range.
    """

    labels: np.ndarray            # (nx, ny, nz) int, 0 = outside mask
    mask: np.ndarray              # (nx, ny, nz) bool
    edges: np.ndarray             # (n_bins + 1,) increasing bin edges
    n_bins: int
    degenerate: bool = False

    def __post_init__(self):
        inside = self.labels[self.mask]
        if inside.size == 0:
            raise InputError("quantized ROI has no in-mask voxels")
        if inside.min() < 1 or inside.max() > self.n_bins:
            raise InputError("in-mask labels must lie in [1, n_bins]")
        if np.any(np.diff(self.edges) <= 0):
            raise InputError("bin edges must be strictly increasing")


@dataclass(frozen=True)
class FeatureVector:
    """The 56 named radiomic scalars in fixed order (see FEATURE_NAMES)."""

    values: tuple[float, ...]
    degenerate: bool = False
    names: ClassVar[tuple[str, ...]] = FEATURE_NAMES

    def __post_init__(self):
        if len(self.values) != 56:
            raise InputError(f"feature vector needs 56 entries, got {len(self.values)}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("feature vector has non-finite entries")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]


def quantize(jmap: JacobianMap, mask: Mask3D, n_bins: int = 32) -> QuantizedROI:
    """Equal-width gray-level labels over the in-mask intensity range.

    The minimum maps to bin 1 and the maximum to bin ``n_bins``.  A constant
    ROI gets a single bin and the degenerate flag.
    """
    if n_bins < 2:
        raise InputError(f"n_bins must be >= 2, got {n_bins}")
    if jmap.geometry != mask.geometry:
        raise InputError("jacobian map and mask must share geometry")
    sel = mask.data
    if not sel.any():
        raise InputError("cannot quantize an empty mask")
    vals = jmap.data[sel]
    lo, hi = float(vals.min()), float(vals.max())
    labels = np.zeros(jmap.data.shape, dtype=np.int32)
    if hi == lo:
        labels[sel] = 1
        edges = np.array([lo - 0.5, lo + 0.5])
        return QuantizedROI(labels, sel.copy(), edges, 1, degenerate=True)
    scaled = (vals - lo) * (n_bins / (hi - lo))
    labels[sel] = np.clip(scaled.astype(np.int64) + 1, 1, n_bins)
    edges = np.linspace(lo, hi, n_bins + 1)
    return QuantizedROI(labels, sel.copy(), edges, n_bins)


def _shifted_pairs(labels: np.ndarray, offset: tuple[int, int, int]):
    """Label pairs (a, b) for voxels x and x + offset, both inside the mask."""
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for axis, d in enumerate(offset):
        if d > 0:
            src[axis] = slice(None, -d)
            dst[axis] = slice(d, None)
        elif d < 0:
            src[axis] = slice(-d, None)
            dst[axis] = slice(None, d)
    a = labels[tuple(src)]
    b = labels[tuple(dst)]
    valid = (a > 0) & (b > 0)
    return a[valid], b[valid]


def glcm(q: QuantizedROI, offset: tuple[int, int, int]) -> np.ndarray:
    """Symmetric normalized co-occurrence matrix for one voxel offset."""
    if tuple(offset) == (0, 0, 0):
        raise InputError("co-occurrence offset must be nonzero")
    a, b = _shifted_pairs(q.labels, tuple(offset))
    if a.size == 0:
        raise InputError(f"no in-mask voxel pairs for offset {tuple(offset)}")
    counts = np.zeros((q.n_bins, q.n_bins))
    np.add.at(counts, (a - 1, b - 1), 1.0)
    counts = counts + counts.T
    return counts / counts.sum()


def glcm_features(m: np.ndarray) -> dict[str, float]:
    """The 14 co-occurrence statistics of a normalized symmetric matrix.

    Natural-log entropies.  ``Correlation`` is the Pearson correlation of the
    level pair; ``Haralick Correlation`` normalizes the cross moment by the
    variance of the marginal distribution itself (the convention of the
    classic ITK texture filter), so the two differ away from degenerate
    cases.  Zero-variance marginals define both correlations as 0.
    """
    n = m.shape[0]
    i = np.arange(1, n + 1)
    pij = m
    px = pij.sum(axis=1)                      # marginal; == py by symmetry
    mu = float(px @ i)
    var = float(px @ (i - mu) ** 2)
    ii, jj = np.meshgrid(i, i, indexing="ij")

    nz = pij > 0
    energy = float((pij ** 2).sum())
    entropy = float(-(pij[nz] * np.log(pij[nz])).sum())
    autocorr = float((ii * jj * pij).sum())
    if var > 0.0:
        correlation = float((((ii - mu) * (jj - mu)) * pij).sum() / var)
    else:
        correlation = 0.0
    marg_var = float(((px - 1.0 / n) ** 2).mean())
    haralick = (autocorr - mu * mu) / marg_var if marg_var > 0.0 else 0.0
    contrast = float(((ii - jj) ** 2 * pij).sum())
    idm = float((pij / (1.0 + (ii - jj) ** 2)).sum())

    # distributions of the level sum i+j (range 2..2n) and |i-j| (0..n-1)
    ks = np.arange(2, 2 * n + 1)
    p_sum = np.zeros(ks.size)
    np.add.at(p_sum, (ii + jj - 2).ravel(), pij.ravel())
    kd = np.arange(n)
    p_diff = np.zeros(n)
    np.add.at(p_diff, np.abs(ii - jj).ravel(), pij.ravel())

    sum_avg = float(ks @ p_sum)
    sum_var = float(p_sum @ (ks - sum_avg) ** 2)
    nzs = p_sum > 0
    sum_ent = float(-(p_sum[nzs] * np.log(p_sum[nzs])).sum())
    diff_avg = float(kd @ p_diff)
    diff_var = float(p_diff @ (kd - diff_avg) ** 2)
    nzd = p_diff > 0
    diff_ent = float(-(p_diff[nzd] * np.log(p_diff[nzd])).sum())

    shade = float(((ii + jj - 2.0 * mu) ** 3 * pij).sum())
    prominence = float(((ii + jj - 2.0 * mu) ** 4 * pij).sum())

    vals = (energy, entropy, correlation, haralick, contrast, idm, sum_avg,
            sum_var, sum_ent, diff_var, diff_ent, shade, prominence, autocorr)
    return dict(zip(GLCM_FEATURE_NAMES, vals))


def glrlm(q: QuantizedROI, direction: tuple[int, int, int]) -> np.ndarray:
    """Run-length matrix: counts[level-1, length-1] of maximal runs.

    Runs are maximal segments of equal labels along ``direction``; voxels
    outside the mask break runs.  The matrix is trimmed to the longest
    observed run.
    """
    d = tuple(int(c) for c in direction)
    if d not in OFFSETS_13 and tuple(-c for c in d) not in OFFSETS_13:
        raise InputError(f"direction must be one of the 13 unique 3D directions, got {d}")
    idx = np.argwhere(q.labels > 0)
    labels = q.labels[q.labels > 0]
    dv = np.asarray(d)
    # position along the line and an id for the line itself
    axis = int(np.flatnonzero(dv)[0])
    t = idx[:, axis] * dv[axis]
    line_key = idx - t[:, None] * dv[None, :]
    order = np.lexsort((t, line_key[:, 2], line_key[:, 1], line_key[:, 0]))
    t = t[order]
    labels = labels[order]
    key = line_key[order]
    same_line = np.all(key[1:] == key[:-1], axis=1)
    contiguous = t[1:] == t[:-1] + 1
    extends = same_line & contiguous & (labels[1:] == labels[:-1])
    starts = np.flatnonzero(np.concatenate(([True], ~extends)))
    lengths = np.diff(np.concatenate((starts, [labels.size])))
    run_levels = labels[starts]
    counts = np.zeros((q.n_bins, int(lengths.max())))
    np.add.at(counts, (run_levels - 1, lengths - 1), 1.0)
    return counts


def glrlm_features(m: np.ndarray) -> dict[str, float]:
    """The 11 run-length statistics of a run-count matrix."""
    n_runs = float(m.sum())
    if n_runs == 0:
        raise InputError("run-length matrix has no runs")
    i = np.arange(1, m.shape[0] + 1)[:, None].astype(float)   # gray level
    j = np.arange(1, m.shape[1] + 1)[None, :].astype(float)   # run length
    n_vox = float((m * j).sum())
    vals = (
        float((m / j ** 2).sum() / n_runs),                  # Short Run
        float((m * j ** 2).sum() / n_runs),                  # Long Run
        float((m.sum(axis=1) ** 2).sum() / n_runs),          # Grey Level Nonuniformity
        float((m.sum(axis=0) ** 2).sum() / n_runs),          # Run Length Nonuniformity
        n_runs / n_vox,                                      # Run Percentage
        float((m / i ** 2).sum() / n_runs),                  # Low Grey Level
        float((m * i ** 2).sum() / n_runs),                  # High Grey Level
        float((m / (i ** 2 * j ** 2)).sum() / n_runs),       # Short Run Low Grey Level
        float((m * i ** 2 / j ** 2).sum() / n_runs),         # Short Run High Grey Level
        float((m * j ** 2 / i ** 2).sum() / n_runs),         # Long Run Low Grey Level
        float((m * i ** 2 * j ** 2).sum() / n_runs),         # Long Run High Grey Level
    )
    return dict(zip(GLRLM_FEATURE_NAMES, vals))


def _first_order(vals: np.ndarray, q: QuantizedROI) -> tuple[float, ...]:
    mean = float(vals.mean())
    m2 = float(((vals - mean) ** 2).mean())
    sd = float(np.sqrt(m2))
    if m2 > 0.0:
        skew = float(((vals - mean) ** 3).mean() / m2 ** 1.5)
        kurt = float(((vals - mean) ** 4).mean() / m2 ** 2)
    else:
        skew = 0.0
        kurt = 0.0
    energy = float((vals ** 2).sum())
    counts = np.bincount(q.labels[q.mask], minlength=q.n_bins + 1)[1:]
    p = counts[counts > 0] / counts.sum()
    entropy = float(-(p * np.log(p)).sum())
    return (mean, sd, skew, kurt, energy, entropy)


def extract_all(jmap: JacobianMap, mask: Mask3D, n_bins: int = 32) -> FeatureVector:
    """Full 56-feature vector: first-order + offset-aggregated GLCM/GLRLM.

    Texture features are averaged (mean and population SD) over the 13 unique
    distance-1 offsets in sorted order; permuting the offsets cannot change
    the result.  A constant ROI runs through the single-bin degenerate path
    and sets the flag.
    """
    q = quantize(jmap, mask, n_bins)
    vals = jmap.data[mask.data]
    first = _first_order(vals, q)

    glcm_rows = []
    glrlm_rows = []
    for off in OFFSETS_13:
        feats = glcm_features(glcm(q, off))
        glcm_rows.append([feats[name] for name in GLCM_FEATURE_NAMES])
        feats = glrlm_features(glrlm(q, off))
        glrlm_rows.append([feats[name] for name in GLRLM_FEATURE_NAMES])
    out = list(first)
    for rows in (np.asarray(glcm_rows), np.asarray(glrlm_rows)):
        means = rows.mean(axis=0)
        sds = rows.std(axis=0)
        for col in range(rows.shape[1]):
            out.extend((float(means[col]), float(sds[col])))
    return FeatureVector(tuple(out), degenerate=q.degenerate)
