"""Synthetic sphere phantoms with analytically known shrinkage fields.

Each case is a baseline/follow-up image pair: the baseline contains a sphere
standing in for the metabolic tumor volume, the follow-up the same sphere
contracted by a shrink factor ``s`` (optionally varying per octant to mimic
heterogeneous response).  The contraction is realized by the analytic
displacement

    u(x) = (s - 1) * (x - center)        inside the baseline sphere,

tapered to zero with a C^1 cosine ramp between the baseline radius and twice
that radius, so the true field is compactly supported and diffeomorphic.  Its
Jacobian determinant inside the sphere is s^3, which ties the ground-truth
volume change to the Jacobian-integral estimate the pipeline produces.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .grid import Geometry, Image3D, Mask3D
from .registration import DeformationField

# Fraction of the baseline radius over which the per-octant shrink factors
# blend into each other (tanh width); keeps the heterogeneous field smooth.
_OCTANT_BLEND = 0.25

# Half-width of the sphere's intensity edge ramp, in voxels of the largest
# spacing component.  A finite edge keeps the image band-limited enough for
# the registration metric while the mask stays a sharp center-inside test.
_EDGE_HALF_WIDTH_VOX = 1.0

# Effective per-octant shrink factors beyond this bound can fold the taper
# band; the uniform case is guaranteed diffeomorphic for any s in (0, 1].
_MAX_OCTANT_SHRINK = 1.4

# Randomization ranges used by make_cohort: per-octant multipliers are drawn
# from 1 +/- _COHORT_HETEROGENEITY and every image gets additive Gaussian
# noise of _COHORT_NOISE_SD on its [0, 1] intensity scale.
_COHORT_HETEROGENEITY = 0.08
_COHORT_NOISE_SD = 0.01


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic sphere case.

    ``heterogeneity`` holds eight per-octant multipliers on the shrink
    factor, indexed by octant bit pattern (x-positive = bit 0, y-positive =
    bit 1, z-positive = bit 2 relative to the center); ``None`` means uniform
    shrinkage.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    center: tuple[float, float, float] | None = None
    baseline_radius: float = 16.0
    shrink_factor: float = 0.8
    foreground_intensity: float = 1.0
    background_intensity: float = 0.0
    heterogeneity: tuple[float, ...] | None = None
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.shrink_factor <= 1.0:
            raise ConfigError(f"shrink factor must be in (0, 1], got {self.shrink_factor}")
        if self.baseline_radius <= 0.0:
            raise ConfigError(f"baseline radius must be > 0, got {self.baseline_radius}")
        if self.heterogeneity is not None and len(self.heterogeneity) != 8:
            raise ConfigError("heterogeneity needs one multiplier per octant (8 values), "
                              f"got {len(self.heterogeneity)}")
        if self.noise_sd < 0.0:
            raise ConfigError(f"noise sd must be >= 0, got {self.noise_sd}")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing)

    def center_mm(self) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=np.float64)
        geo = self.geometry
        return (np.asarray(geo.origin)
                + (np.asarray(geo.dims) - 1) * np.asarray(geo.spacing) / 2.0)

    def octant_factors(self) -> np.ndarray:
        """Effective shrink factor per octant (uniform when heterogeneity unset)."""
        if self.heterogeneity is None:
            return np.full(8, self.shrink_factor)
        return self.shrink_factor * np.asarray(self.heterogeneity, dtype=np.float64)


@dataclass(frozen=True)
class PhantomCase:
    """A generated pair with its ground truth."""

    baseline_img: Image3D
    followup_img: Image3D
    baseline_mask: Mask3D
    followup_mask: Mask3D
    true_field: DeformationField
    true_change_pct: float


def _shrink_field(spec: PhantomSpec, centers: tuple[np.ndarray, np.ndarray, np.ndarray]
                  ) -> np.ndarray:
    """Smoothly blended per-voxel shrink factor s(x) over the octants."""
    factors = spec.octant_factors()
    if np.ptp(factors) == 0.0:
        return np.full(spec.dims, factors[0])
    c = spec.center_mm()
    width = _OCTANT_BLEND * spec.baseline_radius
    w = [0.5 * (1.0 + np.tanh((ax - cc) / width)) for ax, cc in zip(centers, c)]
    s = np.zeros(spec.dims)
    for octant in range(8):
        weight = np.ones(spec.dims)
        for axis in range(3):
            pos = w[axis] if (octant >> axis) & 1 else 1.0 - w[axis]
            weight = weight * pos
        s += factors[octant] * weight
    return s


def _cosine_taper(rho: np.ndarray, radius: float) -> np.ndarray:
    """1 inside the sphere, C^1 cosine ramp to 0 between radius and 2*radius."""
    t = np.clip((rho - radius) / radius, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _sphere_image(rho: np.ndarray, radius: np.ndarray | float, spec: PhantomSpec
                  ) -> np.ndarray:
    """Sphere of the given (possibly direction-dependent) radius with a soft edge."""
    half = _EDGE_HALF_WIDTH_VOX * max(spec.spacing)
    t = np.clip((rho - (radius - half)) / (2.0 * half), 0.0, 1.0)
    fg_weight = 0.5 * (1.0 + np.cos(np.pi * t))
    return spec.background_intensity + (
        spec.foreground_intensity - spec.background_intensity) * fg_weight


def make_sphere_phantom(spec: PhantomSpec) -> PhantomCase:
    """Generate one baseline/follow-up pair with its analytic truth.

    The follow-up sphere radius is ``s * baseline_radius`` (per-octant ``s``
    when heterogeneity is set) and the true field maps the baseline sphere
    onto it.  Additive Gaussian noise (clamped back to the intensity range)
    is applied last, seeded from the spec.
    """
    geo = spec.geometry
    c = spec.center_mm()
    r = spec.baseline_radius
    lo_corner = np.asarray(geo.origin) + 4.0 * np.asarray(geo.spacing)
    hi_corner = (np.asarray(geo.origin)
                 + (np.asarray(geo.dims) - 5) * np.asarray(geo.spacing))
    if np.any(c - r < lo_corner) or np.any(c + r > hi_corner):
        raise ConfigError("baseline sphere does not fit inside the grid with a "
                          f"4-voxel margin (center {tuple(c)}, radius {r})")
    factors = spec.octant_factors()
    if np.any(factors <= 0.0) or np.any(factors > _MAX_OCTANT_SHRINK):
        raise ConfigError("per-octant shrink factors must lie in "
                          f"(0, {_MAX_OCTANT_SHRINK}], got {tuple(factors)}")

    centers = geo.voxel_centers()
    diffs = [np.asarray(ax - cc) for ax, cc in zip(centers, c)]
    rho = np.sqrt(sum(np.broadcast_to(d * d, geo.dims) for d in diffs))
    s = _shrink_field(spec, centers)

    baseline = _sphere_image(rho, r, spec)
    followup = _sphere_image(rho, s * r, spec)
    baseline_mask = Mask3D(rho <= r, geo.spacing, geo.origin)
    followup_mask = Mask3D(rho <= s * r, geo.spacing, geo.origin)
    if not followup_mask.data.any():
        raise ConfigError("follow-up sphere is smaller than one voxel; "
                          "increase the radius or the shrink factor")

    scale = (s - 1.0) * _cosine_taper(rho, r)
    vectors = np.stack([scale * np.broadcast_to(d, geo.dims) for d in diffs], axis=-1)
    true_field = DeformationField(vectors, geo.spacing, geo.origin)

    if spec.noise_sd > 0.0:
        rng = np.random.default_rng(spec.seed)
        lo = min(spec.foreground_intensity, spec.background_intensity)
        hi = max(spec.foreground_intensity, spec.background_intensity)
        baseline = np.clip(baseline + rng.normal(0.0, spec.noise_sd, geo.dims), lo, hi)
        followup = np.clip(followup + rng.normal(0.0, spec.noise_sd, geo.dims), lo, hi)

    change = 100.0 * (1.0 - followup_mask.voxel_count / baseline_mask.voxel_count)
    return PhantomCase(
        baseline_img=Image3D(baseline, geo.spacing, geo.origin),
        followup_img=Image3D(followup, geo.spacing, geo.origin),
        baseline_mask=baseline_mask,
        followup_mask=followup_mask,
        true_field=true_field,
        true_change_pct=float(change),
    )


def cohort_specs(n: int, change_range: tuple[float, float], seed: int
                 ) -> list[PhantomSpec]:
    """Specs for a cohort whose target volume changes evenly span the range.

    The shrink factor realizes the target change through s = (1 - c/100)^(1/3);
    per-octant heterogeneity and the noise seed are randomized per case from
    the cohort seed.  Deterministic given (n, change_range, seed).
    """
    if n < 2:
        raise ConfigError(f"cohort size must be >= 2, got {n}")
    lo, hi = change_range
    if not (0.0 <= lo <= hi < 100.0):
        raise ConfigError(f"change range must satisfy 0 <= lo <= hi < 100, got {change_range}")
    rng = np.random.default_rng(seed)
    specs = []
    for target in np.linspace(lo, hi, n):
        s = float((1.0 - target / 100.0) ** (1.0 / 3.0))
        h = rng.uniform(-_COHORT_HETEROGENEITY, _COHORT_HETEROGENEITY, 8)
        case_seed = int(rng.integers(0, 2**31 - 1))
        # Deviations scale with the shrink amount, so an identity target stays
        # an exact identity and every octant remains a true shrink (s_i < 1).
        mult = tuple(float(m) for m in 1.0 + h * (1.0 - s))
        specs.append(replace(PhantomSpec(), shrink_factor=s, heterogeneity=mult,
                             noise_sd=_COHORT_NOISE_SD, seed=case_seed))
    return specs


def make_cohort(n: int, change_range: tuple[float, float], seed: int) -> list[PhantomCase]:
    """Generate a cohort of cases; see :func:`cohort_specs` for the sampling."""
    return [make_sphere_phantom(spec) for spec in cohort_specs(n, change_range, seed)]
