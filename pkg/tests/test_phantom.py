"""Phantom generator oracles: analytic truth, cohort layout, determinism."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from jacmorph.errors import ConfigError
from jacmorph.jacobian import dice, jacobian_map
from jacmorph.phantom import PhantomSpec, cohort_specs, make_cohort, make_sphere_phantom
from jacmorph.registration import warp_mask


def test_identity_case_is_exact():
    spec = PhantomSpec(shrink_factor=1.0, noise_sd=0.0, seed=0)
    case = make_sphere_phantom(spec)
    assert np.array_equal(case.followup_img.data, case.baseline_img.data)
    assert case.true_change_pct == 0.0
    assert np.all(case.true_field.vectors == 0.0)


def test_half_volume_shrinkage():
    # s^3 = 0.5 -> 50 percent volume loss, realized by voxel counting
    spec = PhantomSpec(shrink_factor=0.5 ** (1.0 / 3.0), noise_sd=0.0, seed=0)
    case = make_sphere_phantom(spec)
    assert case.true_change_pct == pytest.approx(50.0, abs=2.0)


def test_follow_up_radius_and_volume_ratio():
    spec = PhantomSpec(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0),
                       baseline_radius=10.0, shrink_factor=0.5, noise_sd=0.0)
    case = make_sphere_phantom(spec)
    ratio = case.followup_mask.voxel_count / case.baseline_mask.voxel_count
    assert ratio == pytest.approx(0.125, abs=0.015)
    # max extent of the follow-up sphere from the center is s * r = 5 mm
    idx = np.argwhere(case.followup_mask.data)
    center = (np.asarray(spec.dims) - 1) / 2.0
    assert np.linalg.norm(idx - center, axis=1).max() <= 5.0 + 1e-9


def test_true_field_jacobian_is_s_cubed_inside_support():
    s = 0.8
    case = make_sphere_phantom(PhantomSpec(shrink_factor=s, noise_sd=0.0))
    jmap = jacobian_map(case.true_field)
    interior = binary_erosion(case.baseline_mask.data, iterations=2)
    assert np.allclose(jmap.data[interior], s ** 3, atol=1e-6)


def test_true_field_warps_followup_onto_baseline():
    s = 0.5 ** (1.0 / 3.0)
    case = make_sphere_phantom(PhantomSpec(shrink_factor=s, noise_sd=0.0))
    warped = warp_mask(case.followup_mask, case.true_field)
    assert dice(case.baseline_mask, warped) >= 0.95


def test_heterogeneous_octants_change_local_radius():
    hi, lo = 1.2, 0.6
    mult = (lo,) * 7 + (hi,)            # +x +y +z octant grows relative to rest
    spec = PhantomSpec(shrink_factor=0.8, heterogeneity=mult, noise_sd=0.0)
    case = make_sphere_phantom(spec)
    half = spec.dims[0] // 2
    pos = case.followup_mask.data[half:, half:, half:].sum()
    neg = case.followup_mask.data[:half, :half, :half].sum()
    assert pos > neg


def test_noise_is_seeded_and_clamped():
    spec = PhantomSpec(shrink_factor=0.8, noise_sd=0.05, seed=11,
                       foreground_intensity=0.7, background_intensity=0.1)
    a = make_sphere_phantom(spec)
    b = make_sphere_phantom(spec)
    assert np.array_equal(a.baseline_img.data, b.baseline_img.data)
    assert a.baseline_img.data.min() >= 0.1 and a.baseline_img.data.max() <= 0.7
    c = make_sphere_phantom(PhantomSpec(shrink_factor=0.8, noise_sd=0.05, seed=12,
                                        foreground_intensity=0.7,
                                        background_intensity=0.1))
    assert not np.array_equal(a.baseline_img.data, c.baseline_img.data)


def test_sphere_must_fit_with_margin():
    with pytest.raises(ConfigError):
        make_sphere_phantom(PhantomSpec(dims=(16, 16, 16), spacing=(1.0, 1.0, 1.0),
                                        baseline_radius=10.0))


def test_heterogeneity_needs_eight_values():
    with pytest.raises(ConfigError):
        PhantomSpec(heterogeneity=(1.0, 1.0))


def test_shrink_factor_bounds():
    with pytest.raises(ConfigError):
        PhantomSpec(shrink_factor=0.0)
    with pytest.raises(ConfigError):
        PhantomSpec(shrink_factor=1.2)


# --------------------------------------------------------------------------- #
# Cohorts
# --------------------------------------------------------------------------- #
def test_cohort_identity_range():
    cases = make_cohort(2, (0.0, 0.0), seed=1)
    assert [c.true_change_pct for c in cases] == [0.0, 0.0]
    for c in cases:
        assert np.all(c.true_field.vectors == 0.0)


def test_cohort_targets_evenly_span_range():
    specs = cohort_specs(5, (10.0, 80.0), seed=2)
    targets = [100.0 * (1.0 - s.shrink_factor ** 3) for s in specs]
    assert targets == pytest.approx([10.0, 27.5, 45.0, 62.5, 80.0], abs=1e-9)
    realized = [make_sphere_phantom(s).true_change_pct for s in specs]
    assert realized == pytest.approx(targets, abs=3.0)


def test_cohort_bitwise_deterministic():
    a = make_cohort(3, (20.0, 60.0), seed=9)
    b = make_cohort(3, (20.0, 60.0), seed=9)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.baseline_img.data, cb.baseline_img.data)
        assert np.array_equal(ca.followup_img.data, cb.followup_img.data)
        assert ca.true_change_pct == cb.true_change_pct


def test_cohort_size_and_range_validation():
    with pytest.raises(ConfigError):
        cohort_specs(1, (10.0, 80.0), seed=0)
    with pytest.raises(ConfigError):
        cohort_specs(5, (80.0, 10.0), seed=0)
    with pytest.raises(ConfigError):
        cohort_specs(5, (10.0, 100.0), seed=0)
