"""Pure numpy implementations of the hot kernels.

These mirror the compiled versions in ``_ckernels.pyx`` argument for
argument and are selected automatically when the extension is missing.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded
from scipy.spatial.distance import cdist

# 3-point Gauss rule on [0, 1]
GAUSS_X = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


def assemble_bands(h, pq, cq):
    """Tridiagonal bands of the P1 matrices for coefficients sampled at Gauss points.

    Parameters
    ----------
    h : (nel,) element lengths
    pq : (nel, 3) diffusion values at the Gauss points of each element
    cq : (nel, 3) reaction-mass coefficient values at the Gauss points

    Returns
    -------
    diag, off : stiffness-plus-weighted-mass bands (n,), (n-1,)
    """
    h = np.asarray(h, dtype=float)
    nel = h.shape[0]
    pint = pq @ GAUSS_W  # integral of p over the reference element
    phi0 = 1.0 - GAUSS_X
    phi1 = GAUSS_X
    m00 = h * (cq @ (GAUSS_W * phi0 * phi0))
    m01 = h * (cq @ (GAUSS_W * phi0 * phi1))
    m11 = h * (cq @ (GAUSS_W * phi1 * phi1))
    s = pint / h
    diag = np.zeros(nel + 1)
    diag[:-1] += s + m00
    diag[1:] += s + m11
    off = -s + m01
    return diag, off


def directed_hausdorff(A, B, order_a, order_b, local=False):
    """Exact max over rows a of A of min over rows b of B of |a - b|.

    Returns (value, index_a, index_b).  Brute force in chunks; the order
    and locality arguments are accepted for signature parity with the compiled kernel.
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    best, best_pair = -1.0, (0, 0)
    chunk = max(1, int(4_000_000 // max(B.shape[0], 1)))
    for start in range(0, A.shape[0], chunk):
        d = cdist(A[start : start + chunk], B)
        j = np.argmin(d, axis=1)
        dmin = d[np.arange(d.shape[0]), j]
        i = int(np.argmax(dmin))
        if dmin[i] > best:
            best, best_pair = float(dmin[i]), (start + i, int(j[i]))
    return best, best_pair[0], best_pair[1]


def _trimul(d, o, x):
    y = d[:, None] * x
    y[:-1] += o[:, None] * x[1:]
    y[1:] += o[:, None] * x[:-1]
    return y


def _react(u, coef, need_deriv):
    a, cubic, tf, lg, tg, umax, width = coef
    au = np.abs(u)
    if np.isfinite(umax):
        t = np.clip((au - umax) / width, 0.0, 1.0)
        inside = au <= umax
        c = np.where(inside, u, np.sign(u) * (umax + width * (t - t**4 * (2.5 - 3.0 * t + t * t))))
        dc = np.where(inside, 1.0, 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t))
    else:
        c = u
        dc = np.ones_like(u)
    th = np.tanh(c)
    f = a * c - cubic * c**3 + tf * th
    g = lg * c + tg * th
    if not need_deriv:
        return f, g, None, None
    sech2 = 1.0 - th * th
    df = (a - 3.0 * cubic * c * c + tf * sech2) * dc
    dg = (lg + tg * sech2) * dc
    return f, g, df, dg


class _Data:
    def __init__(self, chol, md, mo, dkd, dko, phi, mphi, lam, coef, tol, max_iter):
        self.chol = chol
        self.md, self.mo, self.dkd, self.dko = md, mo, dkd, dko
        self.phi, self.mphi, self.lam = phi, mphi, lam
        self.coef, self.tol, self.max_iter = coef, tol, max_iter


def _load(data, u, fv, gv):
    load = _trimul(data.md, data.mo, fv) - _trimul(data.dkd, data.dko, u)
    load[0] += gv[0]
    load[-1] += gv[-1]
    return load


def _slave(data, v, z, stats):
    """Fixed-point slaving for a batch; v (m, B), z (n, B) warm start, updated in place."""
    prev = None
    for it in range(data.max_iter):
        u = data.phi @ v + z
        fv, gv, _, _ = _react(u, data.coef, False)
        load = _load(data, u, fv, gv)
        coef = data.phi.T @ load
        w = cho_solve_banded((data.chol, True), load - data.mphi @ coef, check_finite=False)
        diff = np.max(np.abs(w - z), axis=0)
        if prev is not None:
            ratio = np.max(diff / np.maximum(prev, 1e-300))
            if it > 1 and np.all(diff > data.tol):
                stats["ratio"] = max(stats["ratio"], float(ratio))
        stats["iters"] = max(stats["iters"], it + 1)
        if np.all(diff <= data.tol):
            stats["residual"] = max(stats["residual"], float(np.max(diff)))
            return u, coef
        prev = diff
        z[...] = w
    raise FloatingPointError("slaving fixed point did not converge")


def _tangent(data, u, dz, stats):
    _, _, dfv, dgv = _react(u, data.coef, True)
    n, B = u.shape
    m = data.phi.shape[1]
    DF = np.empty((B, m, m))
    for j in range(m):
        dzj = dz[:, j, :]
        for it in range(data.max_iter):
            du = data.phi[:, j : j + 1] + dzj
            load = _load(data, du, dfv * du, dgv * du)
            dcoef = data.phi.T @ load
            w = cho_solve_banded((data.chol, True), load - data.mphi @ dcoef, check_finite=False)
            diff = np.max(np.abs(w - dzj), axis=0)
            if np.all(diff <= data.tol):
                stats["residual"] = max(stats["residual"], float(np.max(diff)))
                break
            dzj[...] = w
        else:
            raise FloatingPointError("tangent slaving did not converge")
        DF[:, :, j] = dcoef.T
        DF[:, j, j] -= data.lam[j]
    return DF


def reduced_rhs(data, V, Z, dZ, want_jac, stats):
    """Right-hand side -Lam v + Phi^T h(Phi v + s(v)) for a batch of rows V (B, m)."""
    v = np.ascontiguousarray(V.T)
    z = Z.T.copy()
    u, coef = _slave(data, v, z, stats)
    Z[...] = z.T
    F = (coef - data.lam[:, None] * v).T
    if not want_jac:
        return F, None
    dz = np.transpose(dZ, (1, 2, 0)).copy()  # (n, m, B)
    DF = _tangent(data, u, dz, stats)
    dZ[...] = np.transpose(dz, (2, 0, 1))
    return F, DF


def reduced_flow(data, V0, nsteps, dt, want_jac):
    """RK4 flow of the reduced ODE over nsteps steps of size dt.

    Returns (V, J, stats) with J the Jacobian of the map when requested.
    """
    V = np.array(V0, dtype=float, ndmin=2)
    B, m = V.shape
    n = data.phi.shape[0]
    Z = np.zeros((B, n))
    dZ = np.zeros((B, n, m))
    J = np.repeat(np.eye(m)[None], B, axis=0) if want_jac else None
    stats = {"iters": 0, "residual": 0.0, "ratio": 0.0}
    for _ in range(nsteps):
        F1, D1 = reduced_rhs(data, V, Z, dZ, want_jac, stats)
        F2, D2 = reduced_rhs(data, V + 0.5 * dt * F1, Z, dZ, want_jac, stats)
        F3, D3 = reduced_rhs(data, V + 0.5 * dt * F2, Z, dZ, want_jac, stats)
        F4, D4 = reduced_rhs(data, V + dt * F3, Z, dZ, want_jac, stats)
        if want_jac:
            K1 = D1 @ J
            K2 = D2 @ (J + 0.5 * dt * K1)
            K3 = D3 @ (J + 0.5 * dt * K2)
            K4 = D4 @ (J + dt * K3)
            J = J + dt / 6.0 * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        V = V + dt / 6.0 * (F1 + 2.0 * F2 + 2.0 * F3 + F4)
    return V, J, stats
