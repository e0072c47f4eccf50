# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: P1 band assembly, early-exit Hausdorff distance and
the slaved reduced flow.  Signatures match ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh, fabs, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double GX0 = 0.5 - 0.5 * sqrt(0.6)
cdef double GX2 = 0.5 + 0.5 * sqrt(0.6)
cdef double GW0 = 5.0 / 18.0
cdef double GW1 = 8.0 / 18.0


def assemble_bands(double[::1] h, double[:, ::1] pq, double[:, ::1] cq):
    cdef Py_ssize_t nel = h.shape[0], e
    diag_arr = np.zeros(nel + 1)
    off_arr = np.empty(nel)
    cdef double[::1] diag = diag_arr
    cdef double[::1] off = off_arr
    cdef double xs[3]
    cdef double ws[3]
    xs[0] = GX0; xs[1] = 0.5; xs[2] = GX2
    ws[0] = GW0; ws[1] = GW1; ws[2] = GW0
    cdef double s, m00, m01, m11, pint, c, p0, p1
    cdef int q
    for e in range(nel):
        pint = 0.0
        m00 = 0.0
        m01 = 0.0
        m11 = 0.0
        for q in range(3):
            pint += ws[q] * pq[e, q]
            c = ws[q] * cq[e, q]
            p0 = 1.0 - xs[q]
            p1 = xs[q]
            m00 += c * p0 * p0
            m01 += c * p0 * p1
            m11 += c * p1 * p1
        s = pint / h[e]
        diag[e] += s + h[e] * m00
        diag[e + 1] += s + h[e] * m11
        off[e] = -s + h[e] * m01
    return diag_arr, off_arr


def directed_hausdorff(double[:, ::1] A, double[:, ::1] B,
                       Py_ssize_t[::1] order_a, Py_ssize_t[::1] order_b, bint local=False):
    """Early-exit directed Hausdorff distance (exact).

    For each a the scan over B stops as soon as a point closer than the
    running maximum is found, since such an a cannot raise the maximum.
    Partial sums of squares are abandoned once they exceed the current
    minimum.  With ``local`` the scan for each a starts at the best match of
    the previous a and alternates outwards, which finds a close point almost
    immediately when A and B are ordered samples of nearby curves.
    """
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], d = A.shape[1]
    cdef Py_ssize_t ii, jj, i, j, k, start = 0, off
    cdef double cmax2 = -1.0, cmin2, s, t
    cdef Py_ssize_t best_i = 0, best_j = 0, arg_j
    cdef bint early
    for ii in range(na):
        i = order_a[ii]
        cmin2 = 1e300
        arg_j = -1
        early = False
        for jj in range(nb):
            if local:
                # start, start+1, start-1, start+2, ... folded into [0, nb)
                off = (jj + 1) // 2
                if jj % 2 == 0:
                    j = start - off
                else:
                    j = start + off
                if j < 0:
                    j += nb
                elif j >= nb:
                    j -= nb
            else:
                j = order_b[jj]
            s = 0.0
            for k in range(d):
                t = A[i, k] - B[j, k]
                s += t * t
                if s >= cmin2:
                    break
            if s < cmin2:
                cmin2 = s
                arg_j = j
                if cmin2 <= cmax2:
                    early = True
                    break
        if local:
            start = arg_j
        if not early and cmin2 > cmax2:
            cmax2 = cmin2
            best_i = i
            best_j = arg_j
    return sqrt(cmax2), best_i, best_j


# ---------------------------------------------------------------------------
# reduced flow

cdef inline void _react(double u, double* coef, double* f, double* g,
                        double* df, double* dg, bint deriv) noexcept nogil:
    cdef double a = coef[0], cubic = coef[1], tf = coef[2], lg = coef[3]
    cdef double tg = coef[4], umax = coef[5], w = coef[6]
    cdef double au = fabs(u), c, dc, t, th, sg
    if au <= umax:
        c = u
        dc = 1.0
    else:
        t = (au - umax) / w
        if t > 1.0:
            t = 1.0
        sg = 1.0 if u > 0 else -1.0
        c = sg * (umax + w * (t - t * t * t * t * (2.5 - 3.0 * t + t * t)))
        dc = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    th = tanh(c)
    f[0] = a * c - cubic * c * c * c + tf * th
    g[0] = lg * c + tg * th
    if deriv:
        df[0] = (a - 3.0 * cubic * c * c + tf * (1.0 - th * th)) * dc
        dg[0] = (lg + tg * (1.0 - th * th)) * dc


cdef struct RData:
    int n
    int m
    double* cd      # Cholesky diagonal of K0
    double* cs      # Cholesky subdiagonal
    double* md
    double* mo
    double* dkd
    double* dko
    double* phi     # n x m row-major
    double* mphi    # n x m row-major
    double* lam
    double* coef
    double tol
    int max_iter
    # work
    double* u
    double* fv
    double* dfv
    double* load
    double* w
    double* cvec


cdef inline void _chol_solve(RData* D, double* b) noexcept nogil:
    # solve L L^T x = b in place, L lower bidiagonal
    cdef int i, n = D.n
    b[0] = b[0] / D.cd[0]
    for i in range(1, n):
        b[i] = (b[i] - D.cs[i - 1] * b[i - 1]) / D.cd[i]
    b[n - 1] = b[n - 1] / D.cd[n - 1]
    for i in range(n - 2, -1, -1):
        b[i] = (b[i] - D.cs[i] * b[i + 1]) / D.cd[i]


cdef inline void _tail_load(RData* D, double* u, double* fv, double g0, double g1,
                            double* load, double* cvec) noexcept nogil:
    # load = M fv + B g - dK u, then remove its projection onto span(phi)
    cdef int i, k, n = D.n, m = D.m
    for i in range(n):
        load[i] = D.md[i] * fv[i] - D.dkd[i] * u[i]
    for i in range(n - 1):
        load[i] += D.mo[i] * fv[i + 1] - D.dko[i] * u[i + 1]
        load[i + 1] += D.mo[i] * fv[i] - D.dko[i] * u[i]
    load[0] += g0
    load[n - 1] += g1
    for k in range(m):
        cvec[k] = 0.0
    for i in range(n):
        for k in range(m):
            cvec[k] += D.phi[i * m + k] * load[i]
    for i in range(n):
        for k in range(m):
            load[i] -= D.mphi[i * m + k] * cvec[k]


cdef int _slave(RData* D, double* v, double* z, double* F, double* stats) noexcept nogil:
    cdef int i, k, it, n = D.n, m = D.m
    cdef double diff, prev = -1.0, s, g0, g1, dummy, t
    for it in range(D.max_iter):
        for i in range(n):
            s = z[i]
            for k in range(m):
                s += D.phi[i * m + k] * v[k]
            D.u[i] = s
        for i in range(n):
            _react(D.u[i], D.coef, &D.fv[i], &t, &dummy, &dummy, 0)
            if i == 0:
                g0 = t
            if i == n - 1:
                g1 = t
        _tail_load(D, D.u, D.fv, g0, g1, D.w, D.cvec)
        _chol_solve(D, D.w)
        diff = 0.0
        for i in range(n):
            t = fabs(D.w[i] - z[i])
            if t > diff:
                diff = t
        if it + 1 > stats[0]:
            stats[0] = it + 1
        if diff <= D.tol:
            if diff > stats[1]:
                stats[1] = diff
            for k in range(m):
                F[k] = D.cvec[k] - D.lam[k] * v[k]
            return 0
        if prev > 0 and it > 1 and diff / prev > stats[2]:
            stats[2] = diff / prev
        prev = diff
        for i in range(n):
            z[i] = D.w[i]
    return 1


cdef int _tangent(RData* D, double* dz, double* DF, double* stats) noexcept nogil:
    # D.u holds the converged state; dz is n x m row-major warm start
    cdef int i, j, k, it, n = D.n, m = D.m
    cdef double g0 = 0.0, g1 = 0.0, dg0 = 0.0, dg1 = 0.0, f, diff, t, dummy
    for i in range(n):
        _react(D.u[i], D.coef, &f, &t, &D.dfv[i], &dummy, 1)
        if i == 0:
            dg0 = dummy
        if i == n - 1:
            dg1 = dummy
    for j in range(m):
        for it in range(D.max_iter):
            for i in range(n):
                D.load[i] = D.phi[i * m + j] + dz[i * m + j]   # du
                D.fv[i] = D.dfv[i] * D.load[i]
            g0 = dg0 * D.load[0]
            g1 = dg1 * D.load[n - 1]
            _tail_load(D, D.load, D.fv, g0, g1, D.w, D.cvec)
            _chol_solve(D, D.w)
            diff = 0.0
            for i in range(n):
                t = fabs(D.w[i] - dz[i * m + j])
                if t > diff:
                    diff = t
            if diff <= D.tol:
                if diff > stats[1]:
                    stats[1] = diff
                for k in range(m):
                    DF[k * m + j] = D.cvec[k]
                DF[j * m + j] -= D.lam[j]
                break
            for i in range(n):
                dz[i * m + j] = D.w[i]
        else:
            return 1
    return 0


cdef inline void _matmul(int m, double* A, double* B, double* C) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for i in range(m):
        for j in range(m):
            s = 0.0
            for k in range(m):
                s += A[i * m + k] * B[k * m + j]
            C[i * m + j] = s


def reduced_flow(data, V0, int nsteps, double dt, bint want_jac):
    cdef double[:, ::1] chol = np.ascontiguousarray(data.chol)
    cdef double[::1] md = np.ascontiguousarray(data.md), mo = np.ascontiguousarray(data.mo)
    cdef double[::1] dkd = np.ascontiguousarray(data.dkd), dko = np.ascontiguousarray(data.dko)
    cdef double[:, ::1] phi = np.ascontiguousarray(data.phi)
    cdef double[:, ::1] mphi = np.ascontiguousarray(data.mphi)
    cdef double[::1] lam = np.ascontiguousarray(data.lam, dtype=float)
    cdef double[::1] coef = np.ascontiguousarray(data.coef, dtype=float)
    Vout = np.array(V0, dtype=float, ndmin=2, order="C", copy=True)
    cdef double[:, ::1] V = Vout
    cdef int B = V.shape[0], m = V.shape[1], n = phi.shape[0]
    if m != phi.shape[1]:
        raise ValueError("dimension mismatch between points and basis")
    Jout = np.zeros((B, m, m)) if want_jac else None
    cdef double[:, :, ::1] J
    if want_jac:
        J = Jout
    cdef double[::1] cs_arr = np.ascontiguousarray(chol[1, : n - 1]) if n > 1 else np.zeros(1)
    cdef double[::1] cd_arr = np.ascontiguousarray(chol[0, :])
    cdef RData D
    D.n = n
    D.m = m
    D.cd = &cd_arr[0]
    D.cs = &cs_arr[0]
    D.md = &md[0]
    D.mo = &mo[0]
    D.dkd = &dkd[0]
    D.dko = &dko[0]
    D.phi = &phi[0, 0]
    D.mphi = &mphi[0, 0]
    D.lam = &lam[0]
    D.coef = &coef[0]
    D.tol = data.tol
    D.max_iter = data.max_iter
    cdef double* buf = <double*> malloc(sizeof(double) * (6 * n + m + n + n * m + 12 * m + 13 * m * m + 8))
    if buf == NULL:
        raise MemoryError()
    D.u = buf
    D.fv = buf + n
    D.dfv = buf + 2 * n
    D.load = buf + 3 * n
    D.w = buf + 4 * n
    D.cvec = buf + 5 * n
    cdef double* z = buf + 5 * n + m
    cdef double* dz = z + n
    cdef double* v = dz + n * m
    cdef double* vs = v + m
    cdef double* F1 = vs + m
    cdef double* F2 = F1 + m
    cdef double* F3 = F2 + m
    cdef double* F4 = F3 + m
    cdef double* Jc = F4 + m
    cdef double* Js = Jc + m * m
    cdef double* D1 = Js + m * m
    cdef double* D2 = D1 + m * m
    cdef double* D3 = D2 + m * m
    cdef double* D4 = D3 + m * m
    cdef double* K1 = D4 + m * m
    cdef double* K2 = K1 + m * m
    cdef double* K3 = K2 + m * m
    cdef double* K4 = K3 + m * m
    cdef double stats[3]
    stats[0] = 0.0
    stats[1] = 0.0
    stats[2] = 0.0
    cdef int p, step, i, k, err = 0
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0
    with nogil:
        for p in range(B):
            for i in range(n):
                z[i] = 0.0
            for i in range(n * m):
                dz[i] = 0.0
            for k in range(m):
                v[k] = V[p, k]
            for i in range(m * m):
                Jc[i] = 0.0
            for k in range(m):
                Jc[k * m + k] = 1.0
            for step in range(nsteps):
                err = _slave(&D, v, z, F1, stats)
                if err == 0 and want_jac:
                    err = _tangent(&D, dz, D1, stats)
                if err:
                    break
                for k in range(m):
                    vs[k] = v[k] + h2 * F1[k]
                err = _slave(&D, vs, z, F2, stats)
                if err == 0 and want_jac:
                    err = _tangent(&D, dz, D2, stats)
                if err:
                    break
                for k in range(m):
                    vs[k] = v[k] + h2 * F2[k]
                err = _slave(&D, vs, z, F3, stats)
                if err == 0 and want_jac:
                    err = _tangent(&D, dz, D3, stats)
                if err:
                    break
                for k in range(m):
                    vs[k] = v[k] + dt * F3[k]
                err = _slave(&D, vs, z, F4, stats)
                if err == 0 and want_jac:
                    err = _tangent(&D, dz, D4, stats)
                if err:
                    break
                if want_jac:
                    _matmul(m, D1, Jc, K1)
                    for i in range(m * m):
                        Js[i] = Jc[i] + h2 * K1[i]
                    _matmul(m, D2, Js, K2)
                    for i in range(m * m):
                        Js[i] = Jc[i] + h2 * K2[i]
                    _matmul(m, D3, Js, K3)
                    for i in range(m * m):
                        Js[i] = Jc[i] + dt * K3[i]
                    _matmul(m, D4, Js, K4)
                    for i in range(m * m):
                        Jc[i] += h6 * (K1[i] + 2.0 * K2[i] + 2.0 * K3[i] + K4[i])
                for k in range(m):
                    v[k] += h6 * (F1[k] + 2.0 * F2[k] + 2.0 * F3[k] + F4[k])
            if err:
                break
            for k in range(m):
                V[p, k] = v[k]
            if want_jac:
                for i in range(m):
                    for k in range(m):
                        J[p, i, k] = Jc[i * m + k]
    free(buf)
    if err:
        raise FloatingPointError("slaving fixed point did not converge")
    return Vout, Jout, {"iters": int(stats[0]), "residual": stats[1], "ratio": stats[2]}
