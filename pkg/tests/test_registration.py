"""Registration oracles: warping, rigidity penalty, both engines on small pairs."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from jacmorph.errors import ConfigError, GeometryError, InputError
from jacmorph.grid import Image3D, Mask3D
from jacmorph.jacobian import dice, jacobian_map
from jacmorph.phantom import PhantomSpec, make_sphere_phantom
from jacmorph.registration import (
    BSplineGrid,
    DeformationField,
    RegistrationConfig,
    mi_at_coeffs,
    mi_control_gradient,
    register_bsd,
    register_ffd,
    register_pair,
    rigid_center_align,
    rigidity_penalty,
    warp,
    warp_mask,
)

from conftest import UNIT, image_of, mask_of

SMALL_CFG = RegistrationConfig(levels=2, mesh_spacing_coarsest=16.0,
                               iterations=(25, 15), step_size=0.15)


def _zero_field(dims, spacing=UNIT, origin=(0.0, 0.0, 0.0)) -> DeformationField:
    return DeformationField(np.zeros(dims + (3,)), spacing, origin)


def _affine_field(dims, spacing, matrix) -> DeformationField:
    """u(x) = (M - I) (x - center) over the full grid, exactly linear."""
    geo_img = Image3D(np.zeros(dims), spacing, (0.0, 0.0, 0.0))
    xs, ys, zs = geo_img.geometry.voxel_centers()
    center = [(d - 1) * s / 2.0 for d, s in zip(dims, spacing)]
    pts = np.stack([np.broadcast_to(ax, dims) - c
                    for ax, c in zip((xs, ys, zs), center)], axis=-1)
    u = np.einsum("ab,...b->...a", np.asarray(matrix) - np.eye(3), pts)
    return DeformationField(u, spacing, (0.0, 0.0, 0.0))


# --------------------------------------------------------------------------- #
# Alignment and warping
# --------------------------------------------------------------------------- #
def test_rigid_center_align_single_voxels():
    a = np.zeros((8, 8, 8), dtype=bool)
    a[2, 3, 4] = True
    b = np.zeros((8, 8, 8), dtype=bool)
    b[5, 3, 4] = True
    t = rigid_center_align(mask_of(a, spacing=(2.0, 2.0, 2.0)),
                           mask_of(b, spacing=(2.0, 2.0, 2.0)))
    assert t == pytest.approx([6.0, 0.0, 0.0])


def test_rigid_center_align_identical_masks_is_zero():
    m = np.zeros((6, 6, 6), dtype=bool)
    m[2:4, 2:4, 2:4] = True
    assert rigid_center_align(mask_of(m), mask_of(m)) == pytest.approx([0.0, 0.0, 0.0])


def test_warp_zero_field_is_identity():
    rng = np.random.default_rng(0)
    img = image_of(rng.uniform(size=(7, 6, 5)))
    out = warp(img, _zero_field((7, 6, 5)))
    assert np.array_equal(out.data, img.data)


def test_warp_constant_shift_on_ramp():
    dims = (12, 8, 8)
    x = np.broadcast_to(np.arange(12, dtype=float)[:, None, None], dims).copy()
    field = DeformationField(np.broadcast_to([2.0, 0.0, 0.0], dims + (3,)).copy(),
                             UNIT, (0.0, 0.0, 0.0))
    out = warp(image_of(x), field)
    # out(x) = img(x + 2) wherever the source sample is interior
    assert np.allclose(out.data[:9], x[:9] + 2.0, atol=1e-12)
    assert np.allclose(out.data[10:], 11.0, atol=1e-12)      # edge clamp


def test_warp_nearest_keeps_binary_values():
    rng = np.random.default_rng(1)
    img = image_of((rng.uniform(size=(9, 9, 9)) > 0.5).astype(float))
    field = DeformationField(rng.normal(0.0, 0.7, (9, 9, 9, 3)), UNIT, (0.0, 0.0, 0.0))
    out = warp(img, field, interp="nearest")
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_warp_across_geometries_preserves_constants():
    img = Image3D(np.full((10, 10, 10), 3.5), (4.0, 4.0, 4.0), (0.0, 0.0, 0.0))
    field = _zero_field((6, 6, 6), spacing=(2.0, 2.0, 2.0), origin=(4.0, 4.0, 4.0))
    out = warp(img, field)
    assert out.geometry == field.geometry
    assert np.allclose(out.data, 3.5, atol=1e-12)


def test_warp_mask_threshold_and_nearest():
    m = np.zeros((8, 8, 8), dtype=bool)
    m[3:6, 3:6, 3:6] = True
    for method in ("linear", "nearest"):
        out = warp_mask(mask_of(m), _zero_field((8, 8, 8)), method=method)
        assert np.array_equal(out.data, m)


# --------------------------------------------------------------------------- #
# Rigidity penalty
# --------------------------------------------------------------------------- #
def test_rigidity_penalty_zero_field():
    m = np.ones((8, 8, 8), dtype=bool)
    assert rigidity_penalty(_zero_field((8, 8, 8)), mask_of(m)) == 0.0


def test_rigidity_penalty_ignores_rotations():
    th = np.deg2rad(30.0)
    rot = np.array([[np.cos(th), -np.sin(th), 0.0],
                    [np.sin(th), np.cos(th), 0.0],
                    [0.0, 0.0, 1.0]])
    field = _affine_field((10, 10, 10), UNIT, rot)
    m = np.ones((10, 10, 10), dtype=bool)
    assert rigidity_penalty(field, mask_of(m)) == pytest.approx(0.0, abs=1e-20)


def test_rigidity_penalty_uniform_scaling_closed_form():
    # A = sI gives ||A^T A - I||_F^2 = 3 (s^2 - 1)^2 and (det A - 1)^2 = (s^3 - 1)^2
    s = 0.8
    field = _affine_field((10, 10, 10), (2.0, 2.0, 2.0), s * np.eye(3))
    m = np.ones((10, 10, 10), dtype=bool)
    expected = 3.0 * (s**2 - 1.0) ** 2 + (s**3 - 1.0) ** 2
    assert rigidity_penalty(field, mask_of(m, spacing=(2.0, 2.0, 2.0))) == pytest.approx(
        expected, rel=1e-9)
    assert expected == pytest.approx(0.626944)


def test_rigidity_penalty_validation():
    with pytest.raises(InputError):
        rigidity_penalty(_zero_field((6, 6, 6)), mask_of(np.zeros((6, 6, 6), dtype=bool)))
    with pytest.raises(GeometryError):
        rigidity_penalty(_zero_field((6, 6, 6)),
                         mask_of(np.ones((6, 6, 6), dtype=bool), spacing=(2.0, 2.0, 2.0)))


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
def test_config_validation():
    with pytest.raises(ConfigError):
        RegistrationConfig(levels=0, iterations=())
    with pytest.raises(ConfigError):
        RegistrationConfig(iterations=(10, 10))          # 3 levels need 3 counts
    with pytest.raises(ConfigError):
        RegistrationConfig(step_size=0.0)
    with pytest.raises(ConfigError):
        RegistrationConfig(mi_bins=4)
    with pytest.raises(ConfigError):
        RegistrationConfig(mesh_spacing_coarsest=-1.0)


def test_mesh_spacing_halves_per_level():
    cfg = RegistrationConfig()
    assert [cfg.mesh_spacing_at(lv) for lv in range(3)] == [32.0, 16.0, 8.0]


def test_bspline_grid_lattice_roundtrip():
    grid = BSplineGrid(mesh_spacing=16.0)
    lat = grid.lattice((24, 24, 24), (2.0, 2.0, 2.0))
    assert lat.mesh_spacing_mm == 16.0


# --------------------------------------------------------------------------- #
# Engines
# --------------------------------------------------------------------------- #
def _mean_inverse_residual_vox(result) -> float:
    """Mean |u_f(x) + u_i(x + u_f(x))| in voxels over the grid."""
    fwd = result.forward_field
    geo = fwd.geometry
    sp = np.asarray(geo.spacing)
    xs, ys, zs = geo.voxel_centers()
    pts = [np.broadcast_to(ax, geo.dims) + fwd.vectors[..., c]
           for c, ax in enumerate((xs, ys, zs))]
    coords = [(p - o) / s for p, o, s in zip(pts, geo.origin, sp)]
    res = np.empty(geo.dims + (3,))
    for c in range(3):
        res[..., c] = (fwd.vectors[..., c]
                       + map_coordinates(result.inverse_field.vectors[..., c],
                                         coords, order=1, mode="nearest")) / sp[c]
    return float(np.sqrt((res**2).sum(axis=-1)).mean())


@pytest.mark.parametrize("engine", [register_bsd, register_ffd])
def test_identity_pair_stays_put(engine, small_pair):
    result = engine(small_pair.baseline_img, small_pair.baseline_img, SMALL_CFG)
    max_disp_vox = np.abs(result.forward_field.voxel_displacement()).max()
    assert max_disp_vox < 0.1
    warped = warp_mask(small_pair.baseline_mask, result.forward_field)
    assert dice(small_pair.baseline_mask, warped) == 1.0
    assert result.converged


@pytest.mark.parametrize("engine", [register_bsd, register_ffd])
def test_shrinking_pair_improves_overlap(engine, small_pair):
    result = engine(small_pair.baseline_img, small_pair.followup_img, SMALL_CFG)
    before = dice(small_pair.baseline_mask, small_pair.followup_mask)
    warped = warp_mask(small_pair.followup_mask, result.forward_field)
    assert dice(small_pair.baseline_mask, warped) > before
    jmap = jacobian_map(result.forward_field)
    # shrinkage must register as J < 1 inside the baseline sphere
    assert jmap.data[small_pair.baseline_mask.data].mean() < 0.95


def test_bsd_fields_are_diffeomorphic(small_pair):
    result = register_bsd(small_pair.baseline_img, small_pair.followup_img, SMALL_CFG)
    assert jacobian_map(result.forward_field).min() > 0.0
    assert jacobian_map(result.inverse_field).min() > 0.0
    assert _mean_inverse_residual_vox(result) < 0.5


def test_engines_are_deterministic(small_pair):
    a = register_ffd(small_pair.baseline_img, small_pair.followup_img, SMALL_CFG)
    b = register_ffd(small_pair.baseline_img, small_pair.followup_img, SMALL_CFG)
    assert a.cost_trace == b.cost_trace
    assert np.array_equal(a.forward_field.vectors, b.forward_field.vectors)


def test_cost_trace_shape_and_direction(small_pair):
    result = register_ffd(small_pair.baseline_img, small_pair.followup_img, SMALL_CFG)
    assert 0 < len(result.cost_trace) <= sum(SMALL_CFG.iterations)
    assert all(len(row) == 3 for row in result.cost_trace)
    similarities = [row[0] for row in result.cost_trace]
    assert similarities[-1] > similarities[0]     # MI increases over the run


def test_geometry_mismatch_is_rejected(small_pair):
    other = Image3D(small_pair.baseline_img.data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        register_ffd(small_pair.baseline_img, other, SMALL_CFG)


def test_register_pair_recovers_translation():
    base = PhantomSpec(dims=(24, 24, 24), spacing=(2.0, 2.0, 2.0), baseline_radius=7.0,
                       shrink_factor=1.0, noise_sd=0.01, seed=3,
                       foreground_intensity=0.71, background_intensity=0.09,
                       center=(17.0, 23.0, 23.0))
    moved = PhantomSpec(dims=(24, 24, 24), spacing=(2.0, 2.0, 2.0), baseline_radius=7.0,
                        shrink_factor=1.0, noise_sd=0.01, seed=4,
                        foreground_intensity=0.71, background_intensity=0.09,
                        center=(23.0, 23.0, 23.0))
    fixed = make_sphere_phantom(base)
    moving = make_sphere_phantom(moved)
    result = register_pair(fixed.baseline_img, moving.baseline_img, SMALL_CFG,
                           engine="ffd", fixed_mask=fixed.baseline_mask,
                           moving_mask=moving.baseline_mask)
    sel = fixed.baseline_mask.data
    mean_u = result.forward_field.vectors[sel].mean(axis=0)
    assert mean_u == pytest.approx([6.0, 0.0, 0.0], abs=0.75)
    warped = warp_mask(moving.baseline_mask, result.forward_field)
    assert dice(fixed.baseline_mask, warped) > 0.9


def test_mi_control_gradient_matches_finite_differences(small_pair):
    fixed = small_pair.baseline_img
    moving = small_pair.followup_img
    lat = BSplineGrid(mesh_spacing=24.0).lattice(fixed.dims, fixed.spacing)
    rng = np.random.default_rng(7)
    coeffs = rng.normal(0.0, 0.3, lat.n_controls + (3,))
    _, grad = mi_control_gradient(fixed, moving, lat, coeffs)
    h = 1e-4
    for idx in [(1, 1, 1, 0), (2, 2, 2, 1), (0, 3, 1, 2)]:
        plus = coeffs.copy()
        plus[idx] += h
        minus = coeffs.copy()
        minus[idx] -= h
        fd = (mi_at_coeffs(fixed, moving, lat, plus)
              - mi_at_coeffs(fixed, moving, lat, minus)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-3, abs=1e-8)
