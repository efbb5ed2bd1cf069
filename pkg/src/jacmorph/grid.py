"""Geometry-aware 3D scalar images and the intensity conditioning / blending operators.

An :class:`Image3D` is a scalar grid with physical voxel spacing and origin, in
x-fastest voxel order.  All operations here are pure: they return new objects
and never mutate their inputs.  Arrays handed to the constructors are copied
and frozen so instances can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, GeometryError, InputError

Interp = Literal["linear", "nearest"]


@dataclass(frozen=True)
class Geometry:
    """Grid shape plus physical placement: spacing and origin are in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ConfigError(f"all spacing components must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical coordinates of voxel centers, one broadcastable array per axis."""
        axes = [o + np.arange(n) * s for n, s, o in zip(self.dims, self.spacing, self.origin)]
        return np.meshgrid(*axes, indexing="ij", sparse=True)

    def world_to_index(self, points_mm: np.ndarray) -> np.ndarray:
        """Map physical points (..., 3) to continuous voxel indices."""
        pts = np.asarray(points_mm, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr or out.base is arr:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Image3D:
    """3D scalar image; ``data`` has shape ``dims`` = (nx, ny, nz), float64.

    Values are widened to double on construction (inputs may arrive as 16-bit
    integer grids) and must be finite.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ConfigError(f"Image3D data must be 3D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError("Image3D voxels must all be finite")
        geo = Geometry(arr.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", geo.spacing)
        object.__setattr__(self, "origin", geo.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, self.origin)

    def with_data(self, data: np.ndarray) -> "Image3D":
        """New image with the same geometry and different voxel values."""
        return Image3D(data, self.spacing, self.origin)


@dataclass(frozen=True)
class Mask3D:
    """Binary label grid on the same kind of geometry as :class:`Image3D`."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ConfigError(f"Mask3D data must be 3D, got shape {arr.shape}")
        arr = arr.astype(bool)
        geo = Geometry(arr.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", geo.spacing)
        object.__setattr__(self, "origin", geo.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing, self.origin)

    @property
    def voxel_count(self) -> int:
        return int(self.data.sum())

    def centroid_mm(self) -> np.ndarray:
        """Physical centroid of the foreground voxels."""
        if not self.data.any():
            raise InputError("centroid of an empty mask is undefined")
        idx = np.argwhere(self.data).mean(axis=0)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)


@dataclass(frozen=True)
class BlendConfig:
    """Parameters of the two-channel grayscale blending operator.

    ``alpha`` weights the anatomy channel; the follow-up image gets
    ``1 - alpha`` of the functional channel.  Clip and normalization bounds
    are in the native units of each channel (HU for CT, SUV for PET).
    """

    alpha: float = 0.2
    ct_clip_max: float = 750.0
    ct_norm_range: tuple[float, float] = (-1000.0, 750.0)
    pet_norm_range: tuple[float, float] = (0.0, 35.0)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for name, (lo, hi) in (("ct_norm_range", self.ct_norm_range),
                               ("pet_norm_range", self.pet_norm_range)):
            if not lo < hi:
                raise ConfigError(f"{name} must satisfy lo < hi, got ({lo}, {hi})")


def clip_intensity(img: Image3D, max_val: float) -> Image3D:
    """Cap every voxel at ``max_val``; geometry unchanged."""
    if not np.isfinite(max_val):
        raise ConfigError("max_val must be finite")
    return img.with_data(np.minimum(img.data, max_val))


def normalize(img: Image3D, lo: float, hi: float) -> Image3D:
    """Affine rescale of [lo, hi] to [0, 1], clamped at both ends."""
    if not lo < hi:
        raise ConfigError(f"normalize needs lo < hi, got ({lo}, {hi})")
    return img.with_data(np.clip((img.data - lo) / (hi - lo), 0.0, 1.0))


def resample(img: Image3D, target: Geometry, interp: Interp = "linear") -> Image3D:
    """Resample onto ``target`` geometry by sampling in physical space.

    Samples that fall outside the source extent take the nearest boundary
    value (edge clamping; zero fill would create artificial gradients at the
    borders).
    """
    xs, ys, zs = Geometry(target.dims, target.spacing, target.origin).voxel_centers()
    src_sp = np.asarray(img.spacing)
    src_or = np.asarray(img.origin)
    ii = np.broadcast_to((xs - src_or[0]) / src_sp[0], target.dims)
    jj = np.broadcast_to((ys - src_or[1]) / src_sp[1], target.dims)
    kk = np.broadcast_to((zs - src_or[2]) / src_sp[2], target.dims)
    order = 1 if interp == "linear" else 0
    out = map_coordinates(img.data, [ii, jj, kk], order=order, mode="nearest")
    return Image3D(out, target.spacing, target.origin)


def blend(nct: Image3D, npet: Image3D, alpha: float) -> Image3D:
    """Weighted grayscale sum ``alpha * nCT + (1 - alpha) * nPET``.

    Both inputs are expected on the same grid with values in [0, 1], so the
    output is again in [0, 1].
    """
    if nct.geometry != npet.geometry:
        raise GeometryError("blend inputs must share geometry "
                            f"({nct.dims}/{nct.spacing} vs {npet.dims}/{npet.spacing})")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return nct.with_data(alpha * nct.data + (1.0 - alpha) * npet.data)


def blend_raw(ct: Image3D, pet: Image3D, cfg: BlendConfig = BlendConfig()) -> Image3D:
    """Full conditioning pipeline from native-unit channels to one blended image.

    Clips the anatomy channel, resamples the functional channel onto the
    anatomy grid, normalizes both to [0, 1], and blends.
    """
    ct_n = normalize(clip_intensity(ct, cfg.ct_clip_max), *cfg.ct_norm_range)
    pet_on_ct = resample(pet, ct.geometry, "linear")
    pet_n = normalize(pet_on_ct, *cfg.pet_norm_range)
    return blend(ct_n, pet_n, cfg.alpha)


def downsample(img: Image3D, factor: int) -> Image3D:
    """Gaussian anti-alias then subsample by an integer factor per axis.

    Smoothing sigma is 0.5 * factor voxels truncated at 3 sigma; output dims
    are ceil(n / factor) and spacing is multiplied by factor.  Voxel centers
    of the output coincide with every factor-th input center, so the origin
    is unchanged.
    """
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"downsample factor must be >= 1, got {factor}")
    smoothed = gaussian_filter(img.data, sigma=0.5 * factor, truncate=3.0, mode="nearest")
    sub = smoothed[::factor, ::factor, ::factor]
    spacing = tuple(s * factor for s in img.spacing)
    return Image3D(sub, spacing, img.origin)


def downsample_mask(mask: Mask3D, factor: int) -> Mask3D:
    """Subsample a mask by majority after the same smoothing as :func:`downsample`."""
    img = downsample(Image3D(mask.data.astype(np.float64), mask.spacing, mask.origin), factor)
    return Mask3D(img.data >= 0.5, img.spacing, img.origin)
