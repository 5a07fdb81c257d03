"""Compiled particle/grid transfer loops (quadratic B-spline, 3x3x3 stencil).

Each kernel processes the particle range [lo, hi) serially and writes into
caller-owned accumulators, so callers decide how work is split and reduced.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _weights(fx):
    base = np.floor(fx - 0.5)
    f = fx - base
    w = np.empty(3)
    dw = np.empty(3)
    w[0] = 0.5 * (1.5 - f) ** 2
    w[1] = 0.75 - (f - 1.0) ** 2
    w[2] = 0.5 * (f - 0.5) ** 2
    dw[0] = f - 1.5
    dw[1] = -2.0 * (f - 1.0)
    dw[2] = f - 0.5
    return int(base), f, w, dw


@njit(cache=True, nogil=True)
def p2g_range(x, v, C, mass, origin, dx, ny, nz, lo, hi, grid_mass, grid_mom):
    """APIC mass and momentum scatter."""
    inv_dx = 1.0 / dx
    wx = np.empty((3, 3))
    base = np.empty(3, np.int64)
    frac = np.empty(3)
    for p in range(lo, hi):
        for a in range(3):
            b, f, w, _ = _weights((x[p, a] - origin[a]) * inv_dx)
            base[a] = b
            frac[a] = f
            for k in range(3):
                wx[a, k] = w[k]
        m = mass[p]
        for i in range(3):
            ox = (i - frac[0]) * dx
            for j in range(3):
                oy = (j - frac[1]) * dx
                wij = wx[0, i] * wx[1, j]
                for k in range(3):
                    oz = (k - frac[2]) * dx
                    wm = wij * wx[2, k] * m
                    node = ((base[0] + i) * ny + base[1] + j) * nz + base[2] + k
                    grid_mass[node] += wm
                    for c in range(3):
                        grid_mom[node, c] += wm * (v[p, c] + C[p, c, 0] * ox + C[p, c, 1] * oy + C[p, c, 2] * oz)


@njit(cache=True, nogil=True)
def force_range(x, tau_vol, origin, dx, ny, nz, lo, hi, grid_force):
    """Internal force f_i = -sum_p V_p tau_p grad w_ip."""
    inv_dx = 1.0 / dx
    wx = np.empty((3, 3))
    dwx = np.empty((3, 3))
    base = np.empty(3, np.int64)
    g = np.empty(3)
    for p in range(lo, hi):
        for a in range(3):
            b, f, w, dw = _weights((x[p, a] - origin[a]) * inv_dx)
            base[a] = b
            for k in range(3):
                wx[a, k] = w[k]
                dwx[a, k] = dw[k] * inv_dx
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    g[0] = dwx[0, i] * wx[1, j] * wx[2, k]
                    g[1] = wx[0, i] * dwx[1, j] * wx[2, k]
                    g[2] = wx[0, i] * wx[1, j] * dwx[2, k]
                    node = ((base[0] + i) * ny + base[1] + j) * nz + base[2] + k
                    for r in range(3):
                        grid_force[node, r] -= (tau_vol[p, r, 0] * g[0] + tau_vol[p, r, 1] * g[1]
                                                + tau_vol[p, r, 2] * g[2])


@njit(cache=True, nogil=True)
def g2p_range(x, grid_v, origin, dx, ny, nz, lo, hi, v_out, C_out, gradv_out):
    """Gather velocity, APIC affine matrix (4/dx^2 factor) and velocity gradient."""
    inv_dx = 1.0 / dx
    scale = 4.0 * inv_dx * inv_dx
    wx = np.empty((3, 3))
    dwx = np.empty((3, 3))
    base = np.empty(3, np.int64)
    frac = np.empty(3)
    off = np.empty(3)
    g = np.empty(3)
    for p in range(lo, hi):
        for a in range(3):
            b, f, w, dw = _weights((x[p, a] - origin[a]) * inv_dx)
            base[a] = b
            frac[a] = f
            for k in range(3):
                wx[a, k] = w[k]
                dwx[a, k] = dw[k] * inv_dx
        for c in range(3):
            v_out[p, c] = 0.0
            for d in range(3):
                C_out[p, c, d] = 0.0
                gradv_out[p, c, d] = 0.0
        for i in range(3):
            off[0] = (i - frac[0]) * dx
            for j in range(3):
                off[1] = (j - frac[1]) * dx
                for k in range(3):
                    off[2] = (k - frac[2]) * dx
                    w = wx[0, i] * wx[1, j] * wx[2, k]
                    g[0] = dwx[0, i] * wx[1, j] * wx[2, k]
                    g[1] = wx[0, i] * dwx[1, j] * wx[2, k]
                    g[2] = wx[0, i] * wx[1, j] * dwx[2, k]
                    node = ((base[0] + i) * ny + base[1] + j) * nz + base[2] + k
                    for c in range(3):
                        vc = grid_v[node, c]
                        v_out[p, c] += w * vc
                        for d in range(3):
                            C_out[p, c, d] += scale * w * vc * off[d]
                            gradv_out[p, c, d] += vc * g[d]


@njit(cache=True, nogil=True)
def _perp(u, out):
    # unit vector orthogonal to u
    ax = 0
    for a in range(1, 3):
        if abs(u[a]) < abs(u[ax]):
            ax = a
    e = np.zeros(3)
    e[ax] = 1.0
    d = e[0] * u[0] + e[1] * u[1] + e[2] * u[2]
    for a in range(3):
        out[a] = e[a] - d * u[a]
    nrm = np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    for a in range(3):
        out[a] /= nrm


@njit(cache=True, nogil=True)
def svd3_batch(F, U, S, V):
    """One-sided Jacobi SVD of each 3x3 F[p] = U diag(S) V^T.

    Columns are sorted by decreasing norm; det U = det V = +1 and a reflection
    shows up as a negative S[p, 2].
    """
    A = np.empty((3, 3))
    W = np.empty((3, 3))
    u1 = np.empty(3)
    u2 = np.empty(3)
    nrm = np.empty(3)
    for p in range(F.shape[0]):
        for i in range(3):
            for j in range(3):
                A[i, j] = F[p, i, j]
                W[i, j] = 1.0 if i == j else 0.0
        for sweep in range(40):
            rotated = False
            for pq in range(3):
                a = 0 if pq < 2 else 1
                b = 1 if pq == 0 else 2
                alpha = A[0, a] ** 2 + A[1, a] ** 2 + A[2, a] ** 2
                beta = A[0, b] ** 2 + A[1, b] ** 2 + A[2, b] ** 2
                gamma = A[0, a] * A[0, b] + A[1, a] * A[1, b] + A[2, a] * A[2, b]
                if gamma == 0.0 or abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(3):
                    x, y = A[i, a], A[i, b]
                    A[i, a] = c * x - s * y
                    A[i, b] = s * x + c * y
                    x, y = W[i, a], W[i, b]
                    W[i, a] = c * x - s * y
                    W[i, b] = s * x + c * y
            if not rotated:
                break
        for j in range(3):
            nrm[j] = np.sqrt(A[0, j] ** 2 + A[1, j] ** 2 + A[2, j] ** 2)
        # stable descending sort of the three columns
        order = np.argsort(-nrm, kind="mergesort")
        i0, i1, i2 = order[0], order[1], order[2]
        if nrm[i0] > 0.0:
            for a in range(3):
                u1[a] = A[a, i0] / nrm[i0]
        else:
            u1[:] = 0.0
            u1[0] = 1.0
        d = u1[0] * A[0, i1] + u1[1] * A[1, i1] + u1[2] * A[2, i1]
        for a in range(3):
            u2[a] = A[a, i1] - d * u1[a]
        n2 = np.sqrt(u2[0] ** 2 + u2[1] ** 2 + u2[2] ** 2)
        if n2 > 1e-300 and n2 > 1e-14 * nrm[i0]:
            for a in range(3):
                u2[a] /= n2
        else:
            _perp(u1, u2)
        u3x = u1[1] * u2[2] - u1[2] * u2[1]
        u3y = u1[2] * u2[0] - u1[0] * u2[2]
        u3z = u1[0] * u2[1] - u1[1] * u2[0]
        s1 = nrm[i0]
        s2 = u2[0] * A[0, i1] + u2[1] * A[1, i1] + u2[2] * A[2, i1]
        s3 = u3x * A[0, i2] + u3y * A[1, i2] + u3z * A[2, i2]
        for a in range(3):
            U[p, a, 0] = u1[a]
            U[p, a, 1] = u2[a]
            V[p, a, 0] = W[a, i0]
            V[p, a, 1] = W[a, i1]
            V[p, a, 2] = W[a, i2]
        U[p, 0, 2] = u3x
        U[p, 1, 2] = u3y
        U[p, 2, 2] = u3z
        detv = (V[p, 0, 0] * (V[p, 1, 1] * V[p, 2, 2] - V[p, 1, 2] * V[p, 2, 1])
                - V[p, 0, 1] * (V[p, 1, 0] * V[p, 2, 2] - V[p, 1, 2] * V[p, 2, 0])
                + V[p, 0, 2] * (V[p, 1, 0] * V[p, 2, 1] - V[p, 1, 1] * V[p, 2, 0]))
        if detv < 0:
            for a in range(3):
                V[p, a, 2] = -V[p, a, 2]
            s3 = -s3
        S[p, 0] = s1
        S[p, 1] = s2
        S[p, 2] = s3


@njit(cache=True, nogil=True)
def det3_batch(F, out):
    for p in range(F.shape[0]):
        out[p] = (F[p, 0, 0] * (F[p, 1, 1] * F[p, 2, 2] - F[p, 1, 2] * F[p, 2, 1])
                  - F[p, 0, 1] * (F[p, 1, 0] * F[p, 2, 2] - F[p, 1, 2] * F[p, 2, 0])
                  + F[p, 0, 2] * (F[p, 1, 0] * F[p, 2, 1] - F[p, 1, 1] * F[p, 2, 0]))
