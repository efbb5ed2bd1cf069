"""Deformable registration engines under a Parzen-window MI similarity.

Two engines share the multiresolution machinery:

* ``register_ffd`` — free-form deformation: the optimization state is the
  control-coefficient lattice of a cubic B-spline displacement, ascended on
  MI minus a bending-energy penalty.
* ``register_bsd`` — symmetric diffeomorphic: two stationary half-velocity
  fields (fixed-to-mid and moving-to-mid) are stepped by the MI force fitted
  to the B-spline lattice each iteration and exponentiated by scaling and
  squaring, so the composed forward map stays a diffeomorphism.

Displacement and velocity fields are processed internally in voxel units on
the level grid; public fields are in mm on the fixed-image geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from scipy.ndimage import map_coordinates, spline_filter

from . import _kernels
from .bspline import BSplineLattice, bending_energy, bending_gradient
from .errors import ConfigError, DivergedError, GeometryError, InputError
from .grid import Geometry, Image3D, Mask3D, downsample, downsample_mask, resample
from .metric import bin_coordinates, coordinate_scale, evaluate_mi, mi_force_fixed, \
    mi_force_moving, mutual_information

__all__ = [
    "DeformationField", "BSplineGrid", "RegistrationConfig", "RegistrationResult",
    "rigid_center_align", "mutual_information", "register_ffd", "register_bsd",
    "rigidity_penalty", "warp", "warp_mask", "register_pair", "mi_control_gradient",
]

_MIN_STEP = 1e-4          # step underflow bound for divergence / stall detection
_ACCEPT_TOL = 1e-12
# Sufficient-increase rule for the FFD line search: a step must gain at least
# this much objective to be accepted.  Ends a level once only estimator-level
# refinements remain, which is what protects the identity registration from
# accumulating spurious micro-gain steps: the Parzen histogram can always be
# nudged up a little by contracting flat regions against a soft edge, and that
# artifact lives at the bins^2 / (2 N) bias scale (about 2e-3 nats for 32 bins
# on a 64^3 volume).  Genuine alignment earns an order of magnitude more per
# step at the start of every pyramid level.
_FFD_MIN_GAIN = 3e-3


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel displacement in mm: maps fixed point x to moving point x + u(x)."""

    vectors: np.ndarray                     # (nx, ny, nz, 3)
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ConfigError(f"vectors must have shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError("deformation field has non-finite components")
        geo = Geometry(arr.shape[:3], self.spacing, self.origin)
        arr = np.ascontiguousarray(arr)
        if arr is self.vectors:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)
        object.__setattr__(self, "spacing", geo.spacing)
        object.__setattr__(self, "origin", geo.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, self.origin)

    def voxel_displacement(self) -> np.ndarray:
        """Displacement in voxel units of this field's own grid (writable copy)."""
        return np.ascontiguousarray(self.vectors / np.asarray(self.spacing))

    @classmethod
    def from_voxel(cls, disp_vox: np.ndarray, geometry: Geometry) -> "DeformationField":
        return cls(disp_vox * np.asarray(geometry.spacing), geometry.spacing, geometry.origin)

    @classmethod
    def zero(cls, geometry: Geometry) -> "DeformationField":
        return cls(np.zeros(geometry.dims + (3,)), geometry.spacing, geometry.origin)


@dataclass(frozen=True)
class BSplineGrid:
    """Mesh parameters of the control lattice (cubic only)."""

    mesh_spacing: float
    order: int = 3

    def __post_init__(self):
        if self.mesh_spacing <= 0:
            raise ConfigError(f"mesh_spacing must be > 0, got {self.mesh_spacing}")
        if self.order != 3:
            raise ConfigError("only cubic (order 3) B-spline lattices are supported")

    def build(self, dims: tuple[int, int, int],
              spacing: tuple[float, float, float]) -> BSplineLattice:
        return BSplineLattice(dims, spacing, self.mesh_spacing)


@dataclass(frozen=True)
class RegistrationConfig:
    """Shared configuration of both engines.

    ``mesh_spacing_coarsest`` is the control-cell size at the coarsest level
    and is halved at each finer level.  ``geodesic_weight`` only affects the
    BSD engine (velocity decay toward identity); ``bending_weight`` only the
    FFD engine.
    """

    levels: int = 3
    mesh_spacing_coarsest: float = 32.0
    step_size: float = 0.15
    iterations: tuple[int, ...] = (100, 70, 40)
    mi_bins: int = 32
    geodesic_weight: float = 0.01
    bending_weight: float = 1e-3
    rigidity_weight: float = 0.0
    rigidity_mask: Optional[Mask3D] = None
    crop_margin_mm: float = 50.0
    exp_steps: int = 6

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if len(self.iterations) != self.levels:
            raise ConfigError(f"need one iteration count per level, got "
                              f"{len(self.iterations)} for {self.levels} levels")
        if any(int(i) < 1 for i in self.iterations):
            raise ConfigError(f"iteration counts must be positive, got {self.iterations}")
        if self.mi_bins < 8:
            raise ConfigError(f"mi_bins must be >= 8, got {self.mi_bins}")
        if self.mesh_spacing_coarsest <= 0:
            raise ConfigError("mesh_spacing_coarsest must be > 0")
        for name in ("geodesic_weight", "bending_weight",
                     "rigidity_weight", "crop_margin_mm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        object.__setattr__(self, "iterations", tuple(int(i) for i in self.iterations))

    def mesh_spacing_at(self, level: int) -> float:
        """Control-cell size at pyramid level ``level`` (0 = coarsest)."""
        return self.mesh_spacing_coarsest / (2 ** level)


@dataclass(frozen=True)
class RegistrationResult:
    forward_field: DeformationField
    inverse_field: DeformationField
    cost_trace: tuple[tuple[float, float, float], ...]   # (similarity, geodesic, regularizer)
    converged: bool


# ---------------------------------------------------------------------------
# small shared helpers

def _require_same_geometry(a, b, what: str) -> None:
    if a.geometry != b.geometry:
        raise GeometryError(f"{what} must share geometry: "
                            f"{a.dims}/{a.spacing}/{a.origin} vs {b.dims}/{b.spacing}/{b.origin}")


def _pyramid(img: Image3D, levels: int) -> list[Image3D]:
    """Coarse-to-fine image pyramid with factors 2**(levels-1) ... 1.

    The finest level is the original image (no anti-alias smoothing).
    """
    factors = [2 ** (levels - 1 - lv) for lv in range(levels)]
    return [downsample(img, f) if f > 1 else img for f in factors]


def _max_vector_norm(field: np.ndarray) -> float:
    return float(np.sqrt((field * field).sum(axis=-1).max()))


def _resample_disp_vox(disp: np.ndarray, src: Geometry, dst: Geometry) -> np.ndarray:
    """Move a voxel-unit displacement field between grids (values re-scaled)."""
    xs, ys, zs = dst.voxel_centers()
    src_sp = np.asarray(src.spacing)
    src_or = np.asarray(src.origin)
    ii = np.broadcast_to((xs - src_or[0]) / src_sp[0], dst.dims)
    jj = np.broadcast_to((ys - src_or[1]) / src_sp[1], dst.dims)
    kk = np.broadcast_to((zs - src_or[2]) / src_sp[2], dst.dims)
    out = np.empty(dst.dims + (3,))
    scale = np.asarray(src.spacing) / np.asarray(dst.spacing)
    for c in range(3):
        out[..., c] = map_coordinates(disp[..., c], [ii, jj, kk],
                                      order=1, mode="nearest") * scale[c]
    return out


def _warp_cubic(coef: np.ndarray, disp_vox: np.ndarray) -> np.ndarray:
    out = np.empty(coef.shape)
    _kernels.warp_cubic(coef, disp_vox, out)
    return out


def _warp_cubic_grad(coef: np.ndarray, disp_vox: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    val = np.empty(coef.shape)
    grad = np.empty(coef.shape + (3,))
    _kernels.warp_cubic_with_gradient(coef, disp_vox, val, grad)
    return val, grad


def _compose_vox(inner: np.ndarray, outer: np.ndarray) -> np.ndarray:
    out = np.empty_like(inner)
    _kernels.compose_disp(inner, outer, out)
    return out


def _invert_vox(disp: np.ndarray, iters: int = 30) -> np.ndarray:
    out = np.empty_like(disp)
    _kernels.invert_disp(disp, out, iters)
    return out


# ---------------------------------------------------------------------------
# public ops that are not engines

def rigid_center_align(fixed_mask: Mask3D, moving_mask: Mask3D) -> np.ndarray:
    """Translation (mm) superimposing mask centroids: centroid(moving) - centroid(fixed)."""
    return moving_mask.centroid_mm() - fixed_mask.centroid_mm()


def warp(img: Image3D, field: DeformationField,
         interp: Literal["linear", "nearest"] = "linear") -> Image3D:
    """Pull-back resampling: out(x) = img(x + u(x)), edge-clamped.

    The output lives on the field's geometry; the input image may be on any
    grid (sampling happens in world coordinates).
    """
    if img.geometry == field.geometry:
        disp = field.voxel_displacement()
        out = np.empty(img.dims)
        if interp == "linear":
            _kernels.warp_trilinear(img.data, disp, out)
        else:
            _kernels.warp_nearest(img.data, disp, out)
        return Image3D(out, field.spacing, field.origin)
    geo = field.geometry
    xs, ys, zs = geo.voxel_centers()
    pts = [np.broadcast_to(ax, geo.dims) + field.vectors[..., c]
           for c, ax in enumerate((xs, ys, zs))]
    src_sp = np.asarray(img.spacing)
    src_or = np.asarray(img.origin)
    coords = [(p - o) / s for p, o, s in zip(pts, src_or, src_sp)]
    order = 1 if interp == "linear" else 0
    out = map_coordinates(img.data, coords, order=order, mode="nearest")
    return Image3D(out, geo.spacing, geo.origin)


def warp_mask(mask: Mask3D, field: DeformationField,
              method: Literal["linear", "nearest"] = "linear") -> Mask3D:
    """Warp a mask; the linear method interpolates then thresholds at 0.5."""
    img = Image3D(mask.data.astype(np.float64), mask.spacing, mask.origin)
    warped = warp(img, field, "linear" if method == "linear" else "nearest")
    return Mask3D(warped.data >= 0.5, field.spacing, field.origin)


def rigidity_penalty(field: DeformationField, mask: Mask3D) -> float:
    """Mean over mask of ||A^T A - I||_F^2 + (det A - 1)^2 with A = I + grad u (mm)."""
    _require_same_geometry(field, mask, "field and mask")
    if not mask.data.any():
        raise InputError("rigidity penalty over an empty mask is undefined")
    A = _local_jacobian(field.vectors, field.spacing)
    ortho, prop = _rigidity_terms(A)
    sel = mask.data
    return float((ortho[sel] + prop[sel]).mean())


def _local_jacobian(u_mm: np.ndarray, spacing) -> np.ndarray:
    """A(x) = I + du/dx, gradients in physical mm; shape (..., 3, 3), A[..., c, a]."""
    g = np.empty(u_mm.shape[:3] + (3, 3))
    for c in range(3):
        gx, gy, gz = np.gradient(u_mm[..., c], *spacing)
        g[..., c, 0] = gx
        g[..., c, 1] = gy
        g[..., c, 2] = gz
    g[..., 0, 0] += 1.0
    g[..., 1, 1] += 1.0
    g[..., 2, 2] += 1.0
    return g


def _rigidity_terms(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    AtA = np.einsum("...ca,...cb->...ab", A, A)
    AtA[..., 0, 0] -= 1.0
    AtA[..., 1, 1] -= 1.0
    AtA[..., 2, 2] -= 1.0
    ortho = (AtA * AtA).sum(axis=(-2, -1))
    det = np.linalg.det(A)
    return ortho, (det - 1.0) ** 2


def _cofactor(A: np.ndarray) -> np.ndarray:
    """Cofactor matrix C with C[i, j] = d det(A) / d A[i, j]."""
    C = np.empty_like(A)
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != i]
            c = [k for k in range(3) if k != j]
            minor = (A[..., r[0], c[0]] * A[..., r[1], c[1]]
                     - A[..., r[0], c[1]] * A[..., r[1], c[0]])
            C[..., i, j] = ((-1) ** (i + j)) * minor
    return C


def _grad_adjoint(w: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Exact adjoint of the np.gradient stencil along one axis."""
    out = np.zeros_like(w)
    n = w.shape[axis]
    if n < 2:
        return out

    def sl(s):
        idx = [slice(None)] * w.ndim
        idx[axis] = s
        return tuple(idx)

    if n > 2:
        half = w[sl(slice(1, n - 1))] / (2.0 * h)
        out[sl(slice(2, n))] += half
        out[sl(slice(0, n - 2))] -= half
    out[sl(1)] += w[sl(0)] / h
    out[sl(0)] -= w[sl(0)] / h
    out[sl(n - 1)] += w[sl(n - 1)] / h
    out[sl(n - 2)] -= w[sl(n - 2)] / h
    return out


def _rigidity_force(u_mm: np.ndarray, spacing, mask: np.ndarray) -> np.ndarray:
    """d rigidity_penalty / d u (mm), by the exact discrete adjoint of the stencil."""
    A = _local_jacobian(u_mm, spacing)
    AtA = np.einsum("...ca,...cb->...ab", A, A)
    AtA[..., 0, 0] -= 1.0
    AtA[..., 1, 1] -= 1.0
    AtA[..., 2, 2] -= 1.0
    det = np.linalg.det(A)
    S = 4.0 * np.einsum("...cb,...ba->...ca", A, AtA)
    S += 2.0 * (det - 1.0)[..., None, None] * _cofactor(A)
    n_sel = int(mask.sum())
    if n_sel == 0:
        return np.zeros_like(u_mm)
    S *= (mask.astype(np.float64) / n_sel)[..., None, None]
    force = np.zeros_like(u_mm)
    for c in range(3):
        for a in range(3):
            force[..., c] += _grad_adjoint(S[..., c, a], a, spacing[a])
    return force


# ---------------------------------------------------------------------------
# per-level machinery shared by the engines

class _Level:
    """Precomputed per-level quantities: images, spline coefficients, lattice.

    The metric warps use cubic B-spline image interpolation (C^2), so the
    analytic MI force matches the sampled objective with no kinks and the
    monotone line search stays sound.  Histogram ranges are padded so cubic
    overshoot never activates the bin-coordinate clipping.
    """

    def __init__(self, fixed: Image3D, moving: Image3D, mesh_mm: float, n_bins: int):
        self.fixed = fixed.data
        self.moving = moving.data
        self.coef_fixed = spline_filter(fixed.data, order=3, mode="mirror")
        self.coef_moving = spline_filter(moving.data, order=3, mode="mirror")
        self.geometry = fixed.geometry
        self.spacing = np.asarray(fixed.spacing)
        self.n_bins = n_bins
        self.lattice = BSplineLattice(fixed.dims, fixed.spacing, mesh_mm)
        self.f_lo, self.f_hi = _padded_range(self.fixed)
        self.m_lo, self.m_hi = _padded_range(self.moving)
        self.scale_f = coordinate_scale(self.f_lo, self.f_hi, n_bins)
        self.scale_m = coordinate_scale(self.m_lo, self.m_hi, n_bins)
        self.fixed_coords = bin_coordinates(self.fixed, self.f_lo, self.f_hi, n_bins)

    def moving_coords(self, warped: np.ndarray) -> np.ndarray:
        return bin_coordinates(warped, self.m_lo, self.m_hi, self.n_bins)


def _padded_range(arr: np.ndarray, pad: float = 0.25) -> tuple[float, float]:
    lo, hi = float(arr.min()), float(arr.max())
    if not hi > lo:
        return lo, hi
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _build_levels(fixed: Image3D, moving: Image3D, cfg: RegistrationConfig) -> list[_Level]:
    f_pyr = _pyramid(fixed, cfg.levels)
    m_pyr = _pyramid(moving, cfg.levels)
    return [_Level(f, m, cfg.mesh_spacing_at(lv), cfg.mi_bins)
            for lv, (f, m) in enumerate(zip(f_pyr, m_pyr))]


# ---------------------------------------------------------------------------
# FFD engine

class _FFDState:
    """Field, warped image and cost terms for one coefficient setting."""

    def __init__(self, level: _Level, coeffs: np.ndarray, cfg: RegistrationConfig,
                 rigidity_sel: np.ndarray | None = None):
        self.coeffs = coeffs
        self.disp = level.lattice.evaluate(coeffs)
        self.warped, self.grad = _warp_cubic_grad(level.coef_moving, self.disp)
        self.mcoords = level.moving_coords(self.warped)
        self.mi_state = evaluate_mi(level.fixed_coords, self.mcoords, level.n_bins)
        self.mi = self.mi_state.mi
        coeffs_mm = coeffs * level.spacing
        self.bending = bending_energy(coeffs_mm, tuple(level.lattice.cell_mm))
        self.rigidity = 0.0
        if cfg.rigidity_weight > 0.0 and rigidity_sel is not None:
            u_mm = self.disp * level.spacing
            A = _local_jacobian(u_mm, level.spacing)
            ortho, prop = _rigidity_terms(A)
            n_sel = int(rigidity_sel.sum())
            if n_sel:
                self.rigidity = float((ortho[rigidity_sel] + prop[rigidity_sel]).sum() / n_sel)
        self.cost = (self.mi - cfg.bending_weight * self.bending
                     - cfg.rigidity_weight * self.rigidity)


def _ffd_level(level: _Level, coeffs: np.ndarray, n_iters: int, cfg: RegistrationConfig,
               trace: list, rigidity_sel: np.ndarray | None) -> np.ndarray:
    w_bend = cfg.bending_weight
    w_rig = cfg.rigidity_weight if rigidity_sel is not None else 0.0
    state = _FFDState(level, coeffs, cfg, rigidity_sel)
    cell_mm = tuple(level.lattice.cell_mm)
    best = state
    for _ in range(n_iters):
        alpha = mi_force_moving(level.fixed_coords, state.mcoords, state.mi_state)
        force = (alpha * level.scale_m)[..., None] * state.grad
        if w_rig > 0.0 and rigidity_sel is not None:
            # d(penalty)/du in mm -> voxel units needs a spacing factor per component
            rig = _rigidity_force(state.disp * level.spacing, tuple(level.spacing), rigidity_sel)
            force -= w_rig * rig * level.spacing
        # Steepest ascent on the control coefficients: the splat is the exact
        # chain-rule gradient of MI through the (linear) spline evaluation.
        # No Gram solve here -- inverting the spline Gram sharpens the noisy
        # Parzen force into oscillatory lattice modes.
        direction = level.lattice.splat(force)
        if w_bend > 0.0:
            direction -= w_bend * bending_gradient(state.coeffs * level.spacing, cell_mm) * level.spacing
        d_vox = level.lattice.evaluate(direction)
        max_norm = _max_vector_norm(d_vox)
        if not np.isfinite(max_norm):
            raise DivergedError("non-finite FFD update", trace)
        if max_norm < 1e-12:
            break
        step = cfg.step_size
        accepted = None
        while step >= _MIN_STEP:
            trial = _FFDState(level, state.coeffs + (step / max_norm) * direction,
                              cfg, rigidity_sel)
            if not np.isfinite(trial.cost):
                raise DivergedError("non-finite FFD cost", trace)
            if trial.cost >= state.cost + _FFD_MIN_GAIN:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            trace.append((state.mi, 0.0, state.bending + state.rigidity))
            break
        state = accepted
        if state.mi > best.mi:
            best = state
        trace.append((state.mi, 0.0, state.bending + state.rigidity))
    # Keep the MI-monotonicity contract even if the regularized objective
    # preferred a slightly lower-MI iterate late in the level.
    return state.coeffs if state.mi >= best.mi - _ACCEPT_TOL else best.coeffs


def register_ffd(fixed: Image3D, moving: Image3D,
                 cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Free-form B-spline registration, bending-energy regularized.

    The optional rigidity term of ``cfg`` is honored here: when
    ``rigidity_weight > 0`` and a ``rigidity_mask`` is set, the penalty and
    its exact adjoint force are added inside the mask.
    """
    _require_same_geometry(fixed, moving, "fixed and moving")
    levels = _build_levels(fixed, moving, cfg)
    trace: list[tuple[float, float, float]] = []
    coeffs = None
    prev_level = None
    for lv, level in enumerate(levels):
        if coeffs is None:
            coeffs = np.zeros(level.lattice.n_controls + (3,))
        else:
            disp = prev_level.lattice.evaluate(coeffs)
            disp = _resample_disp_vox(disp, prev_level.geometry, level.geometry)
            coeffs = level.lattice.project(disp)
        rigidity_sel = None
        if cfg.rigidity_weight > 0.0 and cfg.rigidity_mask is not None:
            factor = 2 ** (cfg.levels - 1 - lv)
            rigidity_sel = (downsample_mask(cfg.rigidity_mask, factor).data
                            if factor > 1 else cfg.rigidity_mask.data)
        coeffs = _ffd_level(level, coeffs, cfg.iterations[lv], cfg, trace, rigidity_sel)
        prev_level = level
    disp_vox = levels[-1].lattice.evaluate(coeffs)
    geo = levels[-1].geometry
    forward = DeformationField.from_voxel(disp_vox, geo)
    inverse = DeformationField.from_voxel(_invert_vox(disp_vox), geo)
    return RegistrationResult(forward, inverse, tuple(trace), True)


# ---------------------------------------------------------------------------
# BSD engine

class _BSDState:
    """Half-velocities with their exponentials, warps and MI.

    Image gradients are computed lazily: line-search trials only need warped
    values and MI, while the force computation (once per accepted iterate)
    needs the spatial gradients too.
    """

    def __init__(self, level: _Level, v_f: np.ndarray, v_m: np.ndarray, exp_steps: int):
        self._level = level
        self.v_f = v_f
        self.v_m = v_m
        self.exp_f = _kernels.exp_field(v_f, exp_steps)
        self.exp_m = _kernels.exp_field(v_m, exp_steps)
        self.warped_f = _warp_cubic(level.coef_fixed, self.exp_f)
        self.warped_m = _warp_cubic(level.coef_moving, self.exp_m)
        self.fcoords = bin_coordinates(self.warped_f, level.f_lo, level.f_hi, level.n_bins)
        self.mcoords = level.moving_coords(self.warped_m)
        self.mi_state = evaluate_mi(self.fcoords, self.mcoords, level.n_bins)
        self.mi = self.mi_state.mi
        sp = level.spacing
        self.geodesic = float(((v_f * sp) ** 2).sum() + ((v_m * sp) ** 2).sum())
        self._grad_f: np.ndarray | None = None
        self._grad_m: np.ndarray | None = None

    @property
    def grad_f(self) -> np.ndarray:
        if self._grad_f is None:
            _, self._grad_f = _warp_cubic_grad(self._level.coef_fixed, self.exp_f)
        return self._grad_f

    @property
    def grad_m(self) -> np.ndarray:
        if self._grad_m is None:
            _, self._grad_m = _warp_cubic_grad(self._level.coef_moving, self.exp_m)
        return self._grad_m

    def min_half_det(self) -> float:
        """Cheapest fold guard: min Jacobian over the two half-warps."""
        return min(_kernels.min_det_jacobian(self.exp_f),
                   _kernels.min_det_jacobian(self.exp_m))

    def forward_vox(self, exp_steps: int) -> np.ndarray:
        inv_f = _kernels.exp_field(-self.v_f, exp_steps)
        return _compose_vox(inv_f, self.exp_m)


def _bsd_level(level: _Level, v_f: np.ndarray, v_m: np.ndarray, n_iters: int,
               cfg: RegistrationConfig, trace: list) -> tuple[np.ndarray, np.ndarray]:
    state = _BSDState(level, v_f, v_m, cfg.exp_steps)
    step = cfg.step_size
    for _ in range(n_iters):
        alpha_m = mi_force_moving(state.fcoords, state.mcoords, state.mi_state)
        alpha_f = mi_force_fixed(state.fcoords, state.mcoords, state.mi_state)
        force_m = (alpha_m * level.scale_m)[..., None] * state.grad_m
        force_f = (alpha_f * level.scale_f)[..., None] * state.grad_f
        smooth_m = level.lattice.smooth(force_m)
        smooth_f = level.lattice.smooth(force_f)
        # Mid-point gauge: only the relative half-motion is determined by MI,
        # so the common component of the two updates is projected out.
        direction = 0.5 * (smooth_f - smooth_m)
        max_norm = _max_vector_norm(direction)
        if not np.isfinite(max_norm):
            raise DivergedError("non-finite BSD update", trace)
        if max_norm < 1e-12:
            break
        direction /= max_norm
        accepted = None
        local = step
        jacobian_rejected = False
        while local >= _MIN_STEP:
            # Step-proportional decay realizes the geodesic penalty as its
            # gradient flow alongside the similarity ascent.
            decay = 1.0 - cfg.geodesic_weight * local
            trial = _BSDState(level,
                              decay * state.v_f + local * direction,
                              decay * state.v_m - local * direction,
                              cfg.exp_steps)
            if not np.isfinite(trial.mi):
                raise DivergedError("non-finite BSD cost", trace)
            if trial.min_half_det() <= 0.0:
                jacobian_rejected = True
                local *= 0.5
                continue
            if trial.mi >= state.mi - _ACCEPT_TOL:
                accepted = trial
                break
            local *= 0.5
        if accepted is None:
            if jacobian_rejected and local < _MIN_STEP:
                raise DivergedError(
                    f"BSD step underflowed {_MIN_STEP} while a half-transform "
                    "Jacobian was non-positive", trace)
            trace.append((state.mi, state.geodesic, 0.0))
            break
        state = accepted
        # Remember the accepted scale: the next search resumes from twice it
        # instead of re-probing from the top every iteration.
        step = min(cfg.step_size, 2.0 * local)
        trace.append((state.mi, state.geodesic, 0.0))
    return state.v_f, state.v_m


def register_bsd(fixed: Image3D, moving: Image3D,
                 cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Symmetric diffeomorphic registration with B-spline-fitted MI forces.

    Both half-velocities are stationary.  Every accepted iterate keeps both
    half-transforms fold-free; the composed forward map exp(v_m) after
    exp(-v_f) is additionally validated to have a strictly positive Jacobian
    before a result is returned.
    """
    _require_same_geometry(fixed, moving, "fixed and moving")
    levels = _build_levels(fixed, moving, cfg)
    trace: list[tuple[float, float, float]] = []
    v_f = v_m = None
    prev_geo = None
    for lv, level in enumerate(levels):
        if v_f is None:
            v_f = np.zeros(level.geometry.dims + (3,))
            v_m = np.zeros(level.geometry.dims + (3,))
        else:
            v_f = _resample_disp_vox(v_f, prev_geo, level.geometry)
            v_m = _resample_disp_vox(v_m, prev_geo, level.geometry)
        v_f, v_m = _bsd_level(level, v_f, v_m, cfg.iterations[lv], cfg, trace)
        prev_geo = level.geometry
    final = _BSDState(levels[-1], v_f, v_m, cfg.exp_steps)
    geo = levels[-1].geometry
    forward_vox = final.forward_vox(cfg.exp_steps)
    inverse_vox = _compose_vox(_kernels.exp_field(-final.v_m, cfg.exp_steps), final.exp_f)
    min_j = _kernels.min_det_jacobian(forward_vox)
    if min_j <= 0.0:
        raise DivergedError(f"final BSD forward field has min Jacobian {min_j:.3g}", trace)
    forward = DeformationField.from_voxel(forward_vox, geo)
    inverse = DeformationField.from_voxel(inverse_vox, geo)
    return RegistrationResult(forward, inverse, tuple(trace), True)


# ---------------------------------------------------------------------------
# gradient exposure for verification

def mi_control_gradient(fixed: Image3D, moving: Image3D, lattice: BSplineLattice,
                        coeffs: np.ndarray, n_bins: int = 32
                        ) -> tuple[float, np.ndarray]:
    """MI of (fixed, moving warped by the spline) and its exact coefficient gradient.

    The gradient chains the Parzen-window derivative through the trilinear
    interpolant and the B-spline basis (the adjoint splat), with intensity
    ranges fixed from the unwarped images.  Intended for finite-difference
    verification of the similarity force.
    """
    _require_same_geometry(fixed, moving, "fixed and moving")
    f = fixed.data
    m = moving.data
    f_lo, f_hi = _padded_range(f)
    m_lo, m_hi = _padded_range(m)
    fc = bin_coordinates(f, f_lo, f_hi, n_bins)
    coef_m = spline_filter(m, order=3, mode="mirror")
    disp = lattice.evaluate(coeffs)
    warped, grad = _warp_cubic_grad(coef_m, disp)
    mc = bin_coordinates(warped, m_lo, m_hi, n_bins)
    st = evaluate_mi(fc, mc, n_bins)
    alpha = mi_force_moving(fc, mc, st) * coordinate_scale(m_lo, m_hi, n_bins)
    force = alpha[..., None] * grad
    return st.mi, lattice.splat(force)


def mi_at_coeffs(fixed: Image3D, moving: Image3D, lattice: BSplineLattice,
                 coeffs: np.ndarray, n_bins: int = 32) -> float:
    """MI evaluated exactly as :func:`mi_control_gradient` does (for FD checks)."""
    f = fixed.data
    m = moving.data
    f_lo, f_hi = _padded_range(f)
    m_lo, m_hi = _padded_range(m)
    fc = bin_coordinates(f, f_lo, f_hi, n_bins)
    coef_m = spline_filter(m, order=3, mode="mirror")
    warped = _warp_cubic(coef_m, lattice.evaluate(coeffs))
    mc = bin_coordinates(warped, m_lo, m_hi, n_bins)
    return evaluate_mi(fc, mc, n_bins).mi


# ---------------------------------------------------------------------------
# pair driver: crop, pre-align, optional rigidity pre-pass, engine, embed

def _crop_region(geometry: Geometry, fixed_mask: Optional[Mask3D],
                 moving_mask: Optional[Mask3D], margin_mm: float
                 ) -> tuple[slice, slice, slice]:
    if fixed_mask is None:
        return tuple(slice(0, d) for d in geometry.dims)
    points = [np.argwhere(fixed_mask.data)]
    if moving_mask is not None and moving_mask.data.any():
        world = (np.argwhere(moving_mask.data) * np.asarray(moving_mask.spacing)
                 + np.asarray(moving_mask.origin))
        points.append(geometry.world_to_index(world))
    idx = np.concatenate([np.asarray(p, dtype=float) for p in points], axis=0)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    pad = margin_mm / np.asarray(geometry.spacing)
    lo = np.maximum(np.floor(lo - pad).astype(int), 0)
    hi = np.minimum(np.ceil(hi + pad).astype(int) + 1, np.asarray(geometry.dims))
    # keep enough room for the pyramid and the lattice
    for a in range(3):
        while hi[a] - lo[a] < min(8, geometry.dims[a]):
            if lo[a] > 0:
                lo[a] -= 1
            elif hi[a] < geometry.dims[a]:
                hi[a] += 1
            else:
                break
    return tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))


def _crop_image(img: Image3D, sl: tuple[slice, slice, slice]) -> Image3D:
    origin = tuple(o + s.start * sp for o, s, sp in zip(img.origin, sl, img.spacing))
    return Image3D(img.data[sl], img.spacing, origin)


def register_pair(fixed: Image3D, moving: Image3D, cfg: RegistrationConfig,
                  engine: Literal["bsd", "ffd"] = "bsd",
                  fixed_mask: Optional[Mask3D] = None,
                  moving_mask: Optional[Mask3D] = None,
                  rigidity_prepass: bool = False) -> RegistrationResult:
    """Full pair driver used by the pipeline.

    Crops to the mask bounding box dilated by ``cfg.crop_margin_mm``, applies
    the centroid pre-translation, optionally runs a rigidity-penalized FFD
    pre-pass (the penalty confined to the fixed mask), then the requested
    engine; the returned fields live on the full fixed geometry with the crop
    embedded and the translation folded in.
    """
    if engine not in ("bsd", "ffd"):
        raise ConfigError(f"unknown engine {engine!r}")
    geometry = fixed.geometry
    sl = _crop_region(geometry, fixed_mask, moving_mask, cfg.crop_margin_mm)
    fixed_c = _crop_image(fixed, sl)
    translation = np.zeros(3)
    if fixed_mask is not None and moving_mask is not None \
            and fixed_mask.data.any() and moving_mask.data.any():
        translation = rigid_center_align(fixed_mask, moving_mask)
    shifted = Geometry(fixed_c.dims, fixed_c.spacing,
                       tuple(o + t for o, t in zip(fixed_c.origin, translation)))
    moving_c = Image3D(resample(moving, shifted, "linear").data,
                       fixed_c.spacing, fixed_c.origin)

    traces: list[tuple[float, float, float]] = []
    pre_fwd_vox = None
    pre_inv_vox = None
    work_moving = moving_c
    if rigidity_prepass and fixed_mask is not None:
        mask_c = Mask3D(fixed_mask.data[sl], fixed_c.spacing, fixed_c.origin)
        pre_cfg = replace(cfg, rigidity_weight=cfg.rigidity_weight or 0.1,
                          rigidity_mask=mask_c,
                          iterations=tuple(max(1, it // 2) for it in cfg.iterations))
        pre = register_ffd(fixed_c, moving_c, pre_cfg)
        traces.extend(pre.cost_trace)
        pre_fwd_vox = pre.forward_field.voxel_displacement()
        pre_inv_vox = pre.inverse_field.voxel_displacement()
        work_moving = warp(moving_c, pre.forward_field, "linear")

    run = register_bsd(fixed_c, work_moving, cfg) if engine == "bsd" \
        else register_ffd(fixed_c, work_moving, cfg)
    traces.extend(run.cost_trace)
    fwd_vox = run.forward_field.voxel_displacement()
    inv_vox = run.inverse_field.voxel_displacement()
    if pre_fwd_vox is not None:
        fwd_vox = _compose_vox(fwd_vox, pre_fwd_vox)
        inv_vox = _compose_vox(pre_inv_vox, inv_vox)

    sp = np.asarray(fixed_c.spacing)
    full_fwd = np.tile(translation, geometry.dims + (1,)).astype(np.float64)
    full_fwd[sl] = fwd_vox * sp + translation
    inv_mm = inv_vox * sp
    full_inv_c = np.zeros(geometry.dims + (3,))
    full_inv_c[sl] = inv_mm
    # inverse(y) = -t + w(y - t): sample the embedded crop inverse at y - t
    shift_back = np.broadcast_to(-translation, geometry.dims + (3,))
    inv_sampled = _sample_field_at(full_inv_c, geometry, shift_back)
    full_inv = inv_sampled - translation
    forward = DeformationField(full_fwd, geometry.spacing, geometry.origin)
    inverse = DeformationField(full_inv, geometry.spacing, geometry.origin)
    return RegistrationResult(forward, inverse, tuple(traces), run.converged)


def _sample_field_at(field_mm: np.ndarray, geometry: Geometry,
                     offset_mm: np.ndarray) -> np.ndarray:
    """Sample a vector field at x + offset(x), trilinear, edge-clamped."""
    disp_vox = np.ascontiguousarray(offset_mm / np.asarray(geometry.spacing))
    out = np.empty_like(field_mm)
    for c in range(3):
        comp = np.ascontiguousarray(field_mm[..., c])
        res = np.empty(geometry.dims)
        _kernels.warp_trilinear(comp, disp_vox, res)
        out[..., c] = res
    return out
