"""Numba inner loops for warping, field composition, and Parzen histogramming.

Displacement fields here are in voxel units, shape (nx, ny, nz, 3); sampling
is trilinear with edge clamping.  Everything is single-threaded so results
are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


@njit(cache=True, inline="always")
def _bspline3(t):
    # Cubic B-spline kernel, support |t| < 2.
    a = abs(t)
    if a < 1.0:
        return (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    if a < 2.0:
        b = 2.0 - a
        return b * b * b / 6.0
    return 0.0


@njit(cache=True, inline="always")
def _bspline3_deriv(t):
    a = abs(t)
    if a < 1.0:
        d = (3.0 * a - 4.0) * a / 2.0
    elif a < 2.0:
        b = 2.0 - a
        d = -b * b / 2.0
    else:
        return 0.0
    return d if t >= 0.0 else -d


@njit(cache=True)
def warp_trilinear(vol, disp, out):
    """out(x) = vol(x + disp(x)) with trilinear interpolation."""
    nx, ny, nz = vol.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = _clamp(i + disp[i, j, k, 0], 0.0, nx - 1.0)
                y = _clamp(j + disp[i, j, k, 1], 0.0, ny - 1.0)
                z = _clamp(k + disp[i, j, k, 2], 0.0, nz - 1.0)
                ix = min(int(x), nx - 2) if nx > 1 else 0
                iy = min(int(y), ny - 2) if ny > 1 else 0
                iz = min(int(z), nz - 2) if nz > 1 else 0
                fx = x - ix
                fy = y - iy
                fz = z - iz
                c00 = vol[ix, iy, iz] * (1 - fx) + vol[ix + 1, iy, iz] * fx
                c10 = vol[ix, iy + 1, iz] * (1 - fx) + vol[ix + 1, iy + 1, iz] * fx
                c01 = vol[ix, iy, iz + 1] * (1 - fx) + vol[ix + 1, iy, iz + 1] * fx
                c11 = vol[ix, iy + 1, iz + 1] * (1 - fx) + vol[ix + 1, iy + 1, iz + 1] * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                out[i, j, k] = c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def warp_nearest(vol, disp, out):
    """out(x) = vol(round(x + disp(x)))."""
    nx, ny, nz = vol.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = _clamp(i + disp[i, j, k, 0], 0.0, nx - 1.0)
                y = _clamp(j + disp[i, j, k, 1], 0.0, ny - 1.0)
                z = _clamp(k + disp[i, j, k, 2], 0.0, nz - 1.0)
                out[i, j, k] = vol[int(round(x)), int(round(y)), int(round(z))]


@njit(cache=True)
def warp_with_gradient(vol, disp, val, grad):
    """Value and exact spatial derivative of vol's trilinear interpolant at x + disp(x).

    The derivative (index units) is of the clamped interpolant, so it is zero
    along axes where the sample was clamped outside the grid.
    """
    nx, ny, nz = vol.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + disp[i, j, k, 0]
                py = j + disp[i, j, k, 1]
                pz = k + disp[i, j, k, 2]
                inx = 1.0 if 0.0 < px < nx - 1.0 else 0.0
                iny = 1.0 if 0.0 < py < ny - 1.0 else 0.0
                inz = 1.0 if 0.0 < pz < nz - 1.0 else 0.0
                x = _clamp(px, 0.0, nx - 1.0)
                y = _clamp(py, 0.0, ny - 1.0)
                z = _clamp(pz, 0.0, nz - 1.0)
                ix = min(int(x), nx - 2) if nx > 1 else 0
                iy = min(int(y), ny - 2) if ny > 1 else 0
                iz = min(int(z), nz - 2) if nz > 1 else 0
                fx = x - ix
                fy = y - iy
                fz = z - iz
                c000 = vol[ix, iy, iz]
                c100 = vol[ix + 1, iy, iz]
                c010 = vol[ix, iy + 1, iz]
                c110 = vol[ix + 1, iy + 1, iz]
                c001 = vol[ix, iy, iz + 1]
                c101 = vol[ix + 1, iy, iz + 1]
                c011 = vol[ix, iy + 1, iz + 1]
                c111 = vol[ix + 1, iy + 1, iz + 1]
                c00 = c000 + fx * (c100 - c000)
                c10 = c010 + fx * (c110 - c010)
                c01 = c001 + fx * (c101 - c001)
                c11 = c011 + fx * (c111 - c011)
                c0 = c00 + fy * (c10 - c00)
                c1 = c01 + fy * (c11 - c01)
                val[i, j, k] = c0 + fz * (c1 - c0)
                dx00 = c100 - c000
                dx10 = c110 - c010
                dx01 = c101 - c001
                dx11 = c111 - c011
                grad[i, j, k, 0] = inx * ((dx00 * (1 - fy) + dx10 * fy) * (1 - fz)
                                          + (dx01 * (1 - fy) + dx11 * fy) * fz)
                grad[i, j, k, 1] = iny * (((c10 - c00) * (1 - fz)) + (c11 - c01) * fz)
                grad[i, j, k, 2] = inz * ((c1 - c0))


@njit(cache=True, inline="always")
def _mirror(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    if i < 0:
        i += period
    if i >= n:
        i = period - i
    return i


@njit(cache=True)
def warp_cubic(coef, disp, out):
    """out(x) = cubic B-spline interpolant of coef at x + disp(x).

    ``coef`` must be the spline-filtered coefficient array (mirror boundary).
    Positions are edge-clamped like the trilinear kernels.
    """
    nx, ny, nz = coef.shape
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = _clamp(i + disp[i, j, k, 0], 0.0, nx - 1.0)
                y = _clamp(j + disp[i, j, k, 1], 0.0, ny - 1.0)
                z = _clamp(k + disp[i, j, k, 2], 0.0, nz - 1.0)
                ix = int(np.floor(x))
                iy = int(np.floor(y))
                iz = int(np.floor(z))
                fx = x - ix
                fy = y - iy
                fz = z - iz
                for a in range(4):
                    wx[a] = _bspline3(fx + 1.0 - a)
                    wy[a] = _bspline3(fy + 1.0 - a)
                    wz[a] = _bspline3(fz + 1.0 - a)
                v = 0.0
                for a in range(4):
                    ia = _mirror(ix - 1 + a, nx)
                    for b in range(4):
                        jb = _mirror(iy - 1 + b, ny)
                        wab = wx[a] * wy[b]
                        for c in range(4):
                            kc = _mirror(iz - 1 + c, nz)
                            v += wab * wz[c] * coef[ia, jb, kc]
                out[i, j, k] = v


@njit(cache=True)
def warp_cubic_with_gradient(coef, disp, val, grad):
    """Cubic-interpolant value and exact spatial gradient at x + disp(x).

    The interpolant is C^2, so unlike the trilinear version the gradient has
    no kinks at integer coordinates; gradients are zeroed along axes whose
    sample position was edge-clamped.
    """
    nx, ny, nz = coef.shape
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    dx = np.empty(4)
    dy = np.empty(4)
    dz = np.empty(4)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + disp[i, j, k, 0]
                py = j + disp[i, j, k, 1]
                pz = k + disp[i, j, k, 2]
                inx = 1.0 if 0.0 < px < nx - 1.0 else 0.0
                iny = 1.0 if 0.0 < py < ny - 1.0 else 0.0
                inz = 1.0 if 0.0 < pz < nz - 1.0 else 0.0
                x = _clamp(px, 0.0, nx - 1.0)
                y = _clamp(py, 0.0, ny - 1.0)
                z = _clamp(pz, 0.0, nz - 1.0)
                ix = int(np.floor(x))
                iy = int(np.floor(y))
                iz = int(np.floor(z))
                fx = x - ix
                fy = y - iy
                fz = z - iz
                for a in range(4):
                    wx[a] = _bspline3(fx + 1.0 - a)
                    wy[a] = _bspline3(fy + 1.0 - a)
                    wz[a] = _bspline3(fz + 1.0 - a)
                    dx[a] = _bspline3_deriv(fx + 1.0 - a)
                    dy[a] = _bspline3_deriv(fy + 1.0 - a)
                    dz[a] = _bspline3_deriv(fz + 1.0 - a)
                v = 0.0
                gx = 0.0
                gy = 0.0
                gz = 0.0
                for a in range(4):
                    ia = _mirror(ix - 1 + a, nx)
                    for b in range(4):
                        jb = _mirror(iy - 1 + b, ny)
                        for c in range(4):
                            kc = _mirror(iz - 1 + c, nz)
                            cv = coef[ia, jb, kc]
                            v += wx[a] * wy[b] * wz[c] * cv
                            gx += dx[a] * wy[b] * wz[c] * cv
                            gy += wx[a] * dy[b] * wz[c] * cv
                            gz += wx[a] * wy[b] * dz[c] * cv
                val[i, j, k] = v
                grad[i, j, k, 0] = inx * gx
                grad[i, j, k, 1] = iny * gy
                grad[i, j, k, 2] = inz * gz


@njit(cache=True)
def compose_disp(inner, outer, out):
    """Displacement of the composed map: out(x) = inner(x) + outer(x + inner(x))."""
    nx, ny, nz = inner.shape[:3]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = _clamp(i + inner[i, j, k, 0], 0.0, nx - 1.0)
                y = _clamp(j + inner[i, j, k, 1], 0.0, ny - 1.0)
                z = _clamp(k + inner[i, j, k, 2], 0.0, nz - 1.0)
                ix = min(int(x), nx - 2) if nx > 1 else 0
                iy = min(int(y), ny - 2) if ny > 1 else 0
                iz = min(int(z), nz - 2) if nz > 1 else 0
                fx = x - ix
                fy = y - iy
                fz = z - iz
                w000 = (1 - fx) * (1 - fy) * (1 - fz)
                w100 = fx * (1 - fy) * (1 - fz)
                w010 = (1 - fx) * fy * (1 - fz)
                w110 = fx * fy * (1 - fz)
                w001 = (1 - fx) * (1 - fy) * fz
                w101 = fx * (1 - fy) * fz
                w011 = (1 - fx) * fy * fz
                w111 = fx * fy * fz
                for c in range(3):
                    s = (w000 * outer[ix, iy, iz, c] + w100 * outer[ix + 1, iy, iz, c]
                         + w010 * outer[ix, iy + 1, iz, c] + w110 * outer[ix + 1, iy + 1, iz, c]
                         + w001 * outer[ix, iy, iz + 1, c] + w101 * outer[ix + 1, iy, iz + 1, c]
                         + w011 * outer[ix, iy + 1, iz + 1, c] + w111 * outer[ix + 1, iy + 1, iz + 1, c])
                    out[i, j, k, c] = inner[i, j, k, c] + s


@njit(cache=True)
def invert_disp(disp, out, iters):
    """Fixed-point inverse: v <- -disp(x + v(x)), starting from v = -disp."""
    nx, ny, nz = disp.shape[:3]
    out[:] = -disp
    tmp = np.empty(3)
    for _ in range(iters):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    x = _clamp(i + out[i, j, k, 0], 0.0, nx - 1.0)
                    y = _clamp(j + out[i, j, k, 1], 0.0, ny - 1.0)
                    z = _clamp(k + out[i, j, k, 2], 0.0, nz - 1.0)
                    ix = min(int(x), nx - 2) if nx > 1 else 0
                    iy = min(int(y), ny - 2) if ny > 1 else 0
                    iz = min(int(z), nz - 2) if nz > 1 else 0
                    fx = x - ix
                    fy = y - iy
                    fz = z - iz
                    for c in range(3):
                        c00 = disp[ix, iy, iz, c] * (1 - fx) + disp[ix + 1, iy, iz, c] * fx
                        c10 = disp[ix, iy + 1, iz, c] * (1 - fx) + disp[ix + 1, iy + 1, iz, c] * fx
                        c01 = disp[ix, iy, iz + 1, c] * (1 - fx) + disp[ix + 1, iy, iz + 1, c] * fx
                        c11 = disp[ix, iy + 1, iz + 1, c] * (1 - fx) + disp[ix + 1, iy + 1, iz + 1, c] * fx
                        c0 = c00 * (1 - fy) + c10 * fy
                        c1 = c01 * (1 - fy) + c11 * fy
                        tmp[c] = c0 * (1 - fz) + c1 * fz
                    out[i, j, k, 0] = -tmp[0]
                    out[i, j, k, 1] = -tmp[1]
                    out[i, j, k, 2] = -tmp[2]


@njit(cache=True)
def joint_hist_cubic(fc, mc, nb):
    """Joint histogram of continuous bin coordinates with cubic Parzen windows.

    Coordinates must lie in [2, nb - 3] so the 4-tap window stays in range.
    Returns unnormalized window mass per (fixed_bin, moving_bin) cell.
    """
    P = np.zeros((nb, nb))
    for n in range(fc.size):
        f = fc[n]
        m = mc[n]
        jf = int(f)
        jm = int(m)
        for a in range(-1, 3):
            wf = _bspline3(f - (jf + a))
            if wf == 0.0:
                continue
            for b in range(-1, 3):
                wm = _bspline3(m - (jm + b))
                if wm != 0.0:
                    P[jf + a, jm + b] += wf * wm
    return P


@njit(cache=True)
def parzen_force(fc, mc, L, out):
    """Per-voxel sum_ij B3(fc - i) * B3'(mc - j) * L[i, j].

    This is the derivative of the histogram-weighted sum of L with respect to
    the moving-axis coordinate mc, used for metric force computation.
    """
    for n in range(fc.size):
        f = fc[n]
        m = mc[n]
        jf = int(f)
        jm = int(m)
        acc = 0.0
        for a in range(-1, 3):
            wf = _bspline3(f - (jf + a))
            if wf == 0.0:
                continue
            for b in range(-1, 3):
                dm = _bspline3_deriv(m - (jm + b))
                if dm != 0.0:
                    acc += wf * dm * L[jf + a, jm + b]
        out[n] = acc


@njit(cache=True)
def min_det_jacobian(disp):
    """Min over voxels of det(I + grad u) for a voxel-unit displacement field.

    Central differences inside, one-sided at the boundary.  The determinant
    is invariant to the voxel-vs-mm unit choice (similarity transform).
    """
    nx, ny, nz = disp.shape[:3]
    best = 1e300
    J = np.empty((3, 3))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(3):
                    if nx == 1:
                        J[c, 0] = 0.0
                    elif i == 0:
                        J[c, 0] = disp[1, j, k, c] - disp[0, j, k, c]
                    elif i == nx - 1:
                        J[c, 0] = disp[i, j, k, c] - disp[i - 1, j, k, c]
                    else:
                        J[c, 0] = 0.5 * (disp[i + 1, j, k, c] - disp[i - 1, j, k, c])
                    if ny == 1:
                        J[c, 1] = 0.0
                    elif j == 0:
                        J[c, 1] = disp[i, 1, k, c] - disp[i, 0, k, c]
                    elif j == ny - 1:
                        J[c, 1] = disp[i, j, k, c] - disp[i, j - 1, k, c]
                    else:
                        J[c, 1] = 0.5 * (disp[i, j + 1, k, c] - disp[i, j - 1, k, c])
                    if nz == 1:
                        J[c, 2] = 0.0
                    elif k == 0:
                        J[c, 2] = disp[i, j, 1, c] - disp[i, j, 0, c]
                    elif k == nz - 1:
                        J[c, 2] = disp[i, j, k, c] - disp[i, j, k - 1, c]
                    else:
                        J[c, 2] = 0.5 * (disp[i, j, k + 1, c] - disp[i, j, k - 1, c])
                a00 = 1.0 + J[0, 0]
                a11 = 1.0 + J[1, 1]
                a22 = 1.0 + J[2, 2]
                det = (a00 * (a11 * a22 - J[1, 2] * J[2, 1])
                       - J[0, 1] * (J[1, 0] * a22 - J[1, 2] * J[2, 0])
                       + J[0, 2] * (J[1, 0] * J[2, 1] - a11 * J[2, 0]))
                if det < best:
                    best = det
    return best


def exp_field(vel: np.ndarray, n_steps: int = 6) -> np.ndarray:
    """Exponential of a stationary voxel-unit velocity field by scaling and squaring."""
    d = np.ascontiguousarray(vel / (2.0 ** n_steps))
    tmp = np.empty_like(d)
    for _ in range(n_steps):
        compose_disp(d, d, tmp)
        d, tmp = tmp, d
    return d
