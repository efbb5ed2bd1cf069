"""Parzen-window mutual information and its voxelwise force.

Both intensity axes use cubic B-spline Parzen windows.  Intensities are
mapped affinely onto bin coordinates in [2, n_bins - 3] so the 4-tap window
support never leaves the histogram; the mapping range is fixed per
registration level from the level images, not from warped intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError


def bin_coordinates(values: np.ndarray, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Map intensities in [lo, hi] onto Parzen bin coordinates in [2, n_bins - 3]."""
    if n_bins < 8:
        raise ConfigError(f"need at least 8 histogram bins, got {n_bins}")
    if not hi > lo:
        return np.full(values.shape, 0.5 * (n_bins - 1))
    t = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return 2.0 + t * (n_bins - 5)


def coordinate_scale(lo: float, hi: float, n_bins: int) -> float:
    """d(bin coordinate) / d(intensity) for the mapping above."""
    if not hi > lo:
        return 0.0
    return (n_bins - 5) / (hi - lo)


@dataclass
class MIState:
    """Joint histogram summaries for one evaluation of the metric."""

    mi: float
    p_joint: np.ndarray       # normalized (n_bins, n_bins), fixed axis first
    log_ratio_moving: np.ndarray   # log(p / p_moving-marginal) where p > 0, else 0
    log_ratio_fixed: np.ndarray    # log(p / p_fixed-marginal) where p > 0, else 0


def evaluate_mi(fixed_coords: np.ndarray, moving_coords: np.ndarray, n_bins: int) -> MIState:
    """Mutual information from flattened Parzen bin coordinates."""
    counts = _kernels.joint_hist_cubic(np.ravel(fixed_coords), np.ravel(moving_coords), n_bins)
    total = counts.sum()
    if not np.isfinite(total) or total <= 0:
        return MIState(0.0, np.zeros((n_bins, n_bins)),
                       np.zeros((n_bins, n_bins)), np.zeros((n_bins, n_bins)))
    p = counts / total
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    nz = p > 0
    log_p = np.zeros_like(p)
    log_p[nz] = np.log(p[nz])
    log_pf = np.zeros_like(pf)
    log_pf[pf > 0] = np.log(pf[pf > 0])
    log_pm = np.zeros_like(pm)
    log_pm[pm > 0] = np.log(pm[pm > 0])
    mi = float(np.sum(p[nz] * (log_p - log_pf[:, None] - log_pm[None, :])[nz]))
    lr_m = np.where(nz, log_p - log_pm[None, :], 0.0)
    lr_f = np.where(nz, log_p - log_pf[:, None], 0.0)
    return MIState(mi, p, lr_m, lr_f)


def mi_force_moving(fixed_coords: np.ndarray, moving_coords: np.ndarray,
                    state: MIState) -> np.ndarray:
    """d MI / d (moving bin coordinate), per voxel.

    Derivative of the smoothed joint histogram with respect to the moving
    sample's window position, gathered against log(p / p_m).  The marginal
    normalization terms cancel because the moving window integrates to one.
    """
    shape = moving_coords.shape
    out = np.empty(moving_coords.size)
    _kernels.parzen_force(np.ravel(fixed_coords), np.ravel(moving_coords),
                          state.log_ratio_moving, out)
    n = moving_coords.size
    return (out / n).reshape(shape)


def mi_force_fixed(fixed_coords: np.ndarray, moving_coords: np.ndarray,
                   state: MIState) -> np.ndarray:
    """d MI / d (fixed bin coordinate), per voxel (for symmetric engines)."""
    shape = fixed_coords.shape
    out = np.empty(fixed_coords.size)
    _kernels.parzen_force(np.ravel(moving_coords), np.ravel(fixed_coords),
                          np.ascontiguousarray(state.log_ratio_fixed.T), out)
    n = fixed_coords.size
    return (out / n).reshape(shape)


def mutual_information(fixed: np.ndarray, moving: np.ndarray, n_bins: int = 32,
                       roi: np.ndarray | None = None) -> float:
    """Mutual information between two aligned intensity arrays.

    Ranges are taken from each array (within ``roi`` if given).  Degenerate
    (constant) inputs have zero information by convention.
    """
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    if fixed.shape != moving.shape:
        raise ConfigError(f"shape mismatch {fixed.shape} vs {moving.shape}")
    if roi is not None:
        f = fixed[roi]
        m = moving[roi]
    else:
        f = np.ravel(fixed)
        m = np.ravel(moving)
    if f.size == 0:
        return 0.0
    flo, fhi = float(f.min()), float(f.max())
    mlo, mhi = float(m.min()), float(m.max())
    if not (fhi > flo) or not (mhi > mlo):
        return 0.0
    fc = bin_coordinates(f, flo, fhi, n_bins)
    mc = bin_coordinates(m, mlo, mhi, n_bins)
    return evaluate_mi(fc, mc, n_bins).mi
