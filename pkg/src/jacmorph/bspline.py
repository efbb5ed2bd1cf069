"""Cubic B-spline control lattice over a voxel grid.

Used two ways by the registration engines: as the parameterization of the
free-form displacement (coefficients are the optimization state) and as a
smoothing operator (least-squares fit of a voxelwise force field onto the
lattice, then evaluation back on the grid).

The lattice covers the full grid extent with an integer number of cells close
to the requested mesh spacing, plus one pad control on each side so every
voxel has the full 4-tap support per axis.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError


def _bspline3_weights(s: np.ndarray) -> np.ndarray:
    """Weights of the 4 controls covering a cell, at local coordinate s in [0, 1]."""
    s2 = s * s
    s3 = s2 * s
    w = np.empty(s.shape + (4,))
    w[..., 0] = (1 - s) ** 3 / 6.0
    w[..., 1] = (3 * s3 - 6 * s2 + 4) / 6.0
    w[..., 2] = (-3 * s3 + 3 * s2 + 3 * s + 1) / 6.0
    w[..., 3] = s3 / 6.0
    return w


class BSplineLattice:
    """Tensor-product cubic B-spline basis over an (nx, ny, nz) grid."""

    def __init__(self, dims: tuple[int, int, int], spacing: tuple[float, float, float],
                 mesh_spacing_mm: float):
        if mesh_spacing_mm <= 0:
            raise ConfigError(f"mesh spacing must be > 0, got {mesh_spacing_mm}")
        self.dims = tuple(int(d) for d in dims)
        self.spacing = tuple(float(s) for s in spacing)
        self.mesh_spacing_mm = float(mesh_spacing_mm)
        self._basis = []
        self.n_cells = []
        self.cell_mm = []
        for n, sp in zip(self.dims, self.spacing):
            extent = max((n - 1) * sp, sp)
            ncell = max(1, int(round(extent / mesh_spacing_mm)))
            cell = extent / ncell
            t = (np.arange(n) * sp) / cell          # continuous cell coordinate in [0, ncell]
            cell_idx = np.minimum(t.astype(int), ncell - 1)
            s = t - cell_idx
            w = _bspline3_weights(s)
            B = np.zeros((n, ncell + 3))
            for tap in range(4):
                B[np.arange(n), cell_idx + tap] += w[:, tap]
            self._basis.append(B)
            self.n_cells.append(ncell)
            self.cell_mm.append(cell)
        self.n_controls = tuple(b.shape[1] for b in self._basis)
        self._gram_cache: dict[float, list] = {}
        self._mass: np.ndarray | None = None

    def basis(self, axis: int) -> np.ndarray:
        return self._basis[axis]

    def _gram(self, damping: float) -> list:
        """Cholesky factors of B^T B + damping * mean(diag) * I per axis."""
        if damping not in self._gram_cache:
            factors = []
            for b in self._basis:
                g = b.T @ b
                mu = damping * float(np.trace(g)) / g.shape[0] + 1e-12
                factors.append(cho_factor(g + mu * np.eye(g.shape[0])))
            self._gram_cache[damping] = factors
        return self._gram_cache[damping]

    def evaluate(self, coeffs: np.ndarray) -> np.ndarray:
        """Sample the spline on the voxel grid.

        ``coeffs`` has shape (ncx, ncy, ncz) or (ncx, ncy, ncz, c); output has
        the grid shape with the trailing axis preserved.
        """
        out = np.tensordot(self._basis[0], coeffs, axes=(1, 0))       # (nx, ncy, ncz[, c])
        out = np.tensordot(self._basis[1], out, axes=(1, 1))          # (ny, nx, ncz[, c])
        out = np.tensordot(self._basis[2], out, axes=(1, 2))          # (nz, ny, nx[, c])
        return np.ascontiguousarray(np.moveaxis(out, (0, 1, 2), (2, 1, 0)))

    def splat(self, field: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`evaluate`: B^T applied per axis.

        For a voxelwise metric force this is the exact chain-rule gradient of
        the metric with respect to the control coefficients.
        """
        out = np.tensordot(self._basis[0], field, axes=(0, 0))
        out = np.tensordot(self._basis[1], out, axes=(0, 1))
        out = np.tensordot(self._basis[2], out, axes=(0, 2))
        return np.ascontiguousarray(np.moveaxis(out, (0, 1, 2), (2, 1, 0)))

    def solve_coeffs(self, rhs: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """Apply the inverse (damped) Gram operator to coefficient-space data.

        The Gram matrix of the tensor-product basis is the Kronecker product
        of the per-axis Gram matrices, so the solve separates into three
        banded solves.  Used as an SPD preconditioner for coefficient-space
        gradients: a nonzero ``damping`` turns it into a ridge solve, which
        bounds the amplification of the weakly-supported pad controls at the
        lattice edge.
        """
        gram = self._gram(damping)
        shape = rhs.shape
        out = cho_solve(gram[0], rhs.reshape(shape[0], -1)).reshape(shape)
        out = np.moveaxis(out, 1, 0)
        out = cho_solve(gram[1], out.reshape(shape[1], -1)).reshape(out.shape)
        out = np.moveaxis(out, 0, 1)
        out = np.moveaxis(out, 2, 0)
        out = cho_solve(gram[2], out.reshape(shape[2], -1)).reshape(out.shape)
        out = np.moveaxis(out, 0, 2)
        return np.ascontiguousarray(out)

    def project(self, field: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """Least-squares fit of a voxelwise field onto the lattice."""
        return self.solve_coeffs(self.splat(field), damping)

    def smooth(self, field: np.ndarray) -> np.ndarray:
        """Mesh-scale smoothing: mass-normalized splat, sampled back on the grid.

        This is a Nadaraya-Watson estimate with the spline basis as the
        kernel: it reproduces constants exactly and, unlike a least-squares
        fit, never amplifies high-frequency content of a noisy force field.
        """
        if self._mass is None:
            ones = np.ones(self.dims)
            self._mass = self.splat(ones)
        coeffs = self.splat(field)
        if field.ndim == 4:
            coeffs = coeffs / self._mass[..., None]
        else:
            coeffs = coeffs / self._mass
        return self.evaluate(coeffs)


def bending_energy(coeffs: np.ndarray, cell_mm: tuple[float, float, float]) -> float:
    """Thin-plate bending energy of the control lattice via second differences.

    Sum over interior controls and components of the squared second
    derivatives (with the mixed terms double-counted, as in the usual
    bending integrand).  Coefficients are in mm.
    """
    total = 0.0
    h = cell_mm
    for a in range(3):
        d2 = _second_diff(coeffs, a) / h[a] ** 2
        total += float(np.sum(d2 * d2))
    for a in range(3):
        for b in range(a + 1, 3):
            dab = _cross_diff(coeffs, a, b) / (h[a] * h[b])
            total += 2.0 * float(np.sum(dab * dab))
    return total


def bending_gradient(coeffs: np.ndarray, cell_mm: tuple[float, float, float]) -> np.ndarray:
    """Exact gradient of :func:`bending_energy` with respect to the coefficients."""
    g = np.zeros_like(coeffs)
    h = cell_mm
    for a in range(3):
        d2 = _second_diff(coeffs, a) / h[a] ** 2
        _second_diff_adjoint(2.0 * d2 / h[a] ** 2, a, g)
    for a in range(3):
        for b in range(a + 1, 3):
            dab = _cross_diff(coeffs, a, b) / (h[a] * h[b])
            _cross_diff_adjoint(4.0 * dab / (h[a] * h[b]), a, b, g)
    return g


def _axis_slice(axis, sl):
    out = [slice(None)] * 4
    out[axis] = sl
    return tuple(out)


def _second_diff(c, axis):
    n = c.shape[axis]
    if n < 3:
        return np.zeros_like(c[_axis_slice(axis, slice(0, 0))])
    return (c[_axis_slice(axis, slice(2, n))] - 2 * c[_axis_slice(axis, slice(1, n - 1))]
            + c[_axis_slice(axis, slice(0, n - 2))])


def _second_diff_adjoint(w, axis, out):
    n = out.shape[axis]
    if n < 3:
        return
    out[_axis_slice(axis, slice(2, n))] += w
    out[_axis_slice(axis, slice(1, n - 1))] -= 2 * w
    out[_axis_slice(axis, slice(0, n - 2))] += w


def _cross_diff(c, a, b):
    na, nb = c.shape[a], c.shape[b]
    if na < 3 or nb < 3:
        shape = list(c.shape)
        shape[a] = max(na - 2, 0)
        shape[b] = max(nb - 2, 0)
        return np.zeros(shape)
    cp = c[_axis_slice(a, slice(2, na))] - c[_axis_slice(a, slice(0, na - 2))]
    return (cp[_axis_slice(b, slice(2, nb))] - cp[_axis_slice(b, slice(0, nb - 2))]) / 4.0


def _cross_diff_adjoint(w, a, b, out):
    na, nb = out.shape[a], out.shape[b]
    if na < 3 or nb < 3:
        return
    wp = np.zeros_like(out[_axis_slice(a, slice(0, na - 2))])
    wp[_axis_slice(b, slice(2, nb))] += w / 4.0
    wp[_axis_slice(b, slice(0, nb - 2))] -= w / 4.0
    out[_axis_slice(a, slice(2, na))] += wp
    out[_axis_slice(a, slice(0, na - 2))] -= wp
