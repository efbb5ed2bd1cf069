"""B-spline lattice oracles: reproduction, adjointness, bending energy."""

from __future__ import annotations

import numpy as np
import pytest

from jacmorph.bspline import BSplineLattice, bending_energy, bending_gradient
from jacmorph.errors import ConfigError

DIMS = (17, 15, 13)
SPACING = (2.0, 2.5, 3.0)


@pytest.fixture(scope="module")
def lattice():
    return BSplineLattice(DIMS, SPACING, mesh_spacing_mm=12.0)


def test_lattice_layout():
    lat = BSplineLattice((33, 33, 33), (2.0, 2.0, 2.0), mesh_spacing_mm=32.0)
    assert lat.n_cells == [2, 2, 2]
    assert lat.cell_mm == [32.0, 32.0, 32.0]
    assert lat.n_controls == (5, 5, 5)       # cells + 3 for the cubic support


def test_mesh_spacing_must_be_positive():
    with pytest.raises(ConfigError):
        BSplineLattice(DIMS, SPACING, mesh_spacing_mm=0.0)


def test_partition_of_unity(lattice):
    ones = np.ones(lattice.n_controls)
    assert np.allclose(lattice.evaluate(ones), 1.0, atol=1e-12)


def test_basis_rows_sum_to_one(lattice):
    for axis in range(3):
        assert np.allclose(lattice.basis(axis).sum(axis=1), 1.0, atol=1e-12)


def test_project_reproduces_constants(lattice):
    field = np.full(DIMS, 3.25)
    coeffs = lattice.project(field)
    assert np.allclose(lattice.evaluate(coeffs), field, atol=1e-8)


def test_project_reproduces_linear_ramps(lattice):
    x, y, z = np.meshgrid(*[np.arange(n) * s for n, s in zip(DIMS, SPACING)],
                          indexing="ij")
    field = 0.5 * x - 0.25 * y + 2.0 * z + 1.0
    coeffs = lattice.project(field)
    assert np.allclose(lattice.evaluate(coeffs), field, atol=1e-6)


def test_splat_is_adjoint_of_evaluate(lattice):
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=lattice.n_controls)
    field = rng.normal(size=DIMS)
    lhs = float(np.sum(lattice.evaluate(coeffs) * field))
    rhs = float(np.sum(coeffs * lattice.splat(field)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_smooth_preserves_constants_and_contracts_noise(lattice):
    field = np.full(DIMS + (3,), -1.5)
    assert np.allclose(lattice.smooth(field), -1.5, atol=1e-10)
    rng = np.random.default_rng(1)
    noise = rng.normal(size=DIMS)
    smoothed = lattice.smooth(noise)
    assert smoothed.std() < 0.5 * noise.std()


def test_solve_coeffs_inverts_gram(lattice):
    rng = np.random.default_rng(2)
    coeffs = rng.normal(size=lattice.n_controls)
    # Gram-apply = splat(evaluate(.)); solve_coeffs should undo it exactly.
    gram_applied = lattice.splat(lattice.evaluate(coeffs))
    assert np.allclose(lattice.solve_coeffs(gram_applied), coeffs, atol=1e-7)


def test_bending_energy_vanishes_on_affine_lattices():
    cell = (2.0, 3.0, 4.0)
    const = np.full((6, 5, 7, 3), 2.0)
    assert bending_energy(const, cell) == 0.0
    i, j, k = np.meshgrid(np.arange(6), np.arange(5), np.arange(7), indexing="ij")
    linear = np.stack([1.0 * i + 2.0 * j, 3.0 * k - j, i - k], axis=-1).astype(float)
    assert bending_energy(linear, cell) == pytest.approx(0.0, abs=1e-20)


def test_bending_energy_quadratic_hand_value():
    # Single-axis parabola c_i = i^2: second difference is 2 at every interior
    # control, so the energy is n_interior * (2 / h^2)^2.
    c = np.zeros((5, 1, 1, 1))
    c[:, 0, 0, 0] = np.arange(5, dtype=float) ** 2
    got = bending_energy(c, (2.0, 2.0, 2.0))
    assert got == pytest.approx(3 * (2.0 / 4.0) ** 2, rel=1e-12)


def test_bending_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    coeffs = rng.normal(size=(5, 4, 6, 3))
    cell = (2.0, 2.5, 3.0)
    grad = bending_gradient(coeffs, cell)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (2, 1, 3, 1), (4, 3, 5, 2), (1, 2, 2, 0)]:
        plus = coeffs.copy()
        plus[idx] += eps
        minus = coeffs.copy()
        minus[idx] -= eps
        fd = (bending_energy(plus, cell) - bending_energy(minus, cell)) / (2 * eps)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)
