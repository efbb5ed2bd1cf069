"""Image-core oracles: clipping, normalization, resampling, blending."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jacmorph.errors import ConfigError, GeometryError, InputError
from jacmorph.grid import (BlendConfig, Geometry, Image3D, Mask3D, blend,
                           blend_raw, clip_intensity, downsample,
                           downsample_mask, normalize, resample)

from conftest import image_of

finite_voxels = arrays(np.float64, (3, 4, 2),
                       elements=st.floats(-2000, 2000, allow_nan=False,
                                          width=32))


# --------------------------------------------------------------------------- #
# clip_intensity
# --------------------------------------------------------------------------- #
def test_clip_above_threshold():
    img = image_of(np.full((2, 2, 2), 2000.0))
    assert clip_intensity(img, 750.0).data.max() == 750.0


def test_clip_below_threshold_unchanged():
    img = image_of(np.full((2, 2, 2), 100.0))
    assert np.array_equal(clip_intensity(img, 750.0).data, img.data)


def test_clip_boundary_fixed_point():
    img = image_of(np.full((2, 2, 2), 750.0))
    assert np.array_equal(clip_intensity(img, 750.0).data, img.data)


@given(finite_voxels, st.floats(-500, 1500, allow_nan=False))
def test_clip_idempotent(vox, max_val):
    once = clip_intensity(image_of(vox), max_val)
    twice = clip_intensity(once, max_val)
    assert np.array_equal(once.data, twice.data)


# --------------------------------------------------------------------------- #
# normalize
# --------------------------------------------------------------------------- #
def test_normalize_hu_bounds():
    img = image_of(np.full((1, 1, 1), -1000.0))
    assert normalize(img, -1000.0, 750.0).data[0, 0, 0] == 0.0
    img = image_of(np.full((1, 1, 1), 750.0))
    assert normalize(img, -1000.0, 750.0).data[0, 0, 0] == 1.0


def test_normalize_midpoint():
    # (-125 + 1000) / 1750 = 0.5 by hand
    img = image_of(np.full((1, 1, 1), -125.0))
    assert normalize(img, -1000.0, 750.0).data[0, 0, 0] == pytest.approx(0.5)


def test_normalize_clamps_out_of_range():
    img = image_of(np.array([[[-5000.0, 5000.0]]]))
    out = normalize(img, -1000.0, 750.0).data
    assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 1.0


def test_normalize_degenerate_range_rejected():
    with pytest.raises(ConfigError):
        normalize(image_of(np.zeros((1, 1, 1))), 5.0, 5.0)


# --------------------------------------------------------------------------- #
# resample
# --------------------------------------------------------------------------- #
def test_resample_identity_geometry_exact():
    rng = np.random.default_rng(0)
    img = image_of(rng.normal(size=(5, 6, 4)), spacing=(1.5, 2.0, 3.0))
    out = resample(img, img.geometry, "linear")
    assert np.array_equal(out.data, img.data)


def test_resample_onto_finer_grid_dims():
    pet = image_of(np.ones((16, 16, 8)), spacing=(4.0, 4.0, 4.25))
    ct_geo = Geometry((64, 64, 9), (0.98, 0.98, 4.0))
    out = resample(pet, ct_geo, "linear")
    assert out.dims == ct_geo.dims and out.spacing == ct_geo.spacing


@given(st.floats(-10, 10, allow_nan=False))
def test_resample_constant_is_constant(value):
    img = image_of(np.full((4, 4, 4), value), spacing=(2.0, 2.0, 2.0))
    out = resample(img, Geometry((7, 5, 3), (1.1, 1.7, 2.9), (-1.0, 0.5, 2.0)))
    assert np.allclose(out.data, value, atol=1e-12)


def test_resample_edge_clamps_outside_extent():
    ramp = image_of(np.arange(8, dtype=float).reshape(8, 1, 1))
    wide = Geometry((12, 1, 1), (1.0, 1.0, 1.0), (-2.0, 0.0, 0.0))
    out = resample(ramp, wide, "linear")
    assert out.data[0, 0, 0] == 0.0 and out.data[-1, 0, 0] == 7.0


# --------------------------------------------------------------------------- #
# blend
# --------------------------------------------------------------------------- #
def test_blend_weights_anatomy_channel():
    nct = image_of(np.ones((2, 2, 2)))
    npet = image_of(np.zeros((2, 2, 2)))
    assert np.allclose(blend(nct, npet, 0.2).data, 0.2)


def test_blend_equal_inputs_fixed_point():
    half = image_of(np.full((2, 2, 2), 0.5))
    for alpha in (0.0, 0.3, 1.0):
        assert np.allclose(blend(half, half, alpha).data, 0.5)


def test_blend_alpha_zero_returns_functional_channel():
    rng = np.random.default_rng(1)
    nct = image_of(rng.random((3, 3, 3)))
    npet = image_of(rng.random((3, 3, 3)))
    assert np.array_equal(blend(nct, npet, 0.0).data, npet.data)


def test_blend_geometry_mismatch_rejected():
    with pytest.raises(GeometryError):
        blend(image_of(np.zeros((2, 2, 2))), image_of(np.zeros((2, 2, 3))), 0.2)


@given(arrays(np.float64, (2, 2, 2), elements=st.floats(0, 1, width=32)),
       arrays(np.float64, (2, 2, 2), elements=st.floats(0, 1, width=32)),
       arrays(np.float64, (2, 2, 2), elements=st.floats(0, 1, width=32)),
       arrays(np.float64, (2, 2, 2), elements=st.floats(0, 1, width=32)),
       st.floats(0, 1, width=32))
def test_blend_affine_in_each_input(a, b, c, d, alpha):
    lhs = blend(image_of(a), image_of(b), alpha).data \
        + blend(image_of(c), image_of(d), alpha).data
    rhs = blend(image_of(a + c), image_of(b + d), alpha).data
    assert np.allclose(lhs, rhs, atol=1e-12)


@given(finite_voxels, finite_voxels, st.floats(0, 1, width=32))
def test_normalize_then_blend_in_unit_range(ct, pet, alpha):
    nct = normalize(image_of(ct), -1000.0, 750.0)
    npet = normalize(image_of(pet), 0.0, 35.0)
    out = blend(nct, npet, alpha).data
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_blend_raw_resamples_and_bounds():
    rng = np.random.default_rng(2)
    ct = image_of(rng.uniform(-200, 900, (6, 6, 6)), spacing=(2.0, 2.0, 2.0))
    pet = image_of(rng.uniform(0, 40, (5, 5, 5)), spacing=(2.4, 2.4, 2.4))
    out = blend_raw(ct, pet, BlendConfig())
    assert out.dims == ct.dims
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


# --------------------------------------------------------------------------- #
# downsample
# --------------------------------------------------------------------------- #
def test_downsample_factor_one_keeps_geometry():
    img = image_of(np.random.default_rng(3).random((6, 6, 6)))
    out = downsample(img, 1)
    assert out.geometry == img.geometry


def test_downsample_dimension_arithmetic():
    img = image_of(np.zeros((64, 64, 64)), spacing=(2.0, 2.0, 2.0))
    out = downsample(img, 2)
    assert out.dims == (32, 32, 32) and out.spacing == (4.0, 4.0, 4.0)


@given(st.floats(-5, 5, allow_nan=False), st.integers(1, 3))
def test_downsample_preserves_constants(value, factor):
    img = image_of(np.full((7, 6, 5), value))
    assert np.allclose(downsample(img, factor).data, value, atol=1e-12)


def test_downsample_factor_below_one_rejected():
    with pytest.raises(ConfigError):
        downsample(image_of(np.zeros((4, 4, 4))), 0)


def test_downsample_mask_stays_binary():
    rng = np.random.default_rng(4)
    mask = Mask3D(rng.random((8, 8, 8)) < 0.5, (1, 1, 1))
    out = downsample_mask(mask, 2)
    assert out.data.dtype == bool and out.dims == (4, 4, 4)


# --------------------------------------------------------------------------- #
# Validation
# --------------------------------------------------------------------------- #
def test_image_rejects_non_finite():
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        Image3D(bad, (1, 1, 1))


def test_geometry_rejects_bad_spacing():
    with pytest.raises(ConfigError):
        Geometry((2, 2, 2), (1.0, 0.0, 1.0))


def test_image_data_is_read_only():
    img = image_of(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0
