# cython: language_level=3
"""Compiled SFP element sweep.

Mirrors :func:`rismrl._kernels_py.sfp_sweep` step for step; the pure-Python
version is the reference and is used when this extension is not built.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, INFINITY, M_PI

cnp.import_array()

cdef double GOLDEN = 0.6180339887498949


cdef inline double complex _cexp(double x) noexcept nogil:
    return cos(x) + 1j * sin(x)


cdef double _trace_inv(double complex[:, ::1] g, double complex[:, ::1] lw,
                       double complex[::1] col, int k) noexcept nogil:
    """trace(G^-1) via Cholesky; +inf when G is not positive definite."""
    cdef int i, j, p
    cdef double complex s
    cdef double d, tr = 0.0
    cdef double scale = 0.0
    for i in range(k):
        scale += g[i, i].real
    if not scale > 0.0:
        return INFINITY
    for j in range(k):
        s = g[j, j]
        for p in range(j):
            s = s - lw[j, p] * lw[j, p].conjugate()
        d = s.real
        if not d > 1e-13 * scale:
            return INFINITY
        d = sqrt(d)
        lw[j, j] = d
        for i in range(j + 1, k):
            s = g[i, j]
            for p in range(j):
                s = s - lw[i, p] * lw[j, p].conjugate()
            lw[i, j] = s / d
    # columns of L^-1 by forward substitution; trace(G^-1) = ||L^-1||_F^2
    for j in range(k):
        for i in range(k):
            if i < j:
                col[i] = 0.0
                continue
            s = 1.0 if i == j else 0.0
            for p in range(j, i):
                s = s - lw[i, p] * col[p]
            col[i] = s / lw[i, i].real
            tr += col[i].real * col[i].real + col[i].imag * col[i].imag
    return tr


cdef double _objective(double theta, double complex[:, ::1] pm, double complex[:, ::1] qm,
                       double complex[:, ::1] g, double complex[:, ::1] lw,
                       double complex[::1] col, int k) noexcept nogil:
    cdef double complex e = _cexp(theta)
    cdef double complex ec = e.conjugate()
    cdef int i, j
    for i in range(k):
        for j in range(k):
            g[i, j] = pm[i, j] + e * qm[i, j] + ec * qm[j, i].conjugate()
    return _trace_inv(g, lw, col, k)


def sfp_sweep(double complex[:, :, ::1] contrib, double[::1] theta,
              double complex[:, ::1] h, int grid, int golden_iters):
    """One pass of per-element phase updates (in place).

    Parameters
    ----------
    contrib : complex array (N, K, M)
        Rank-one per-element channels ``outer(h2[:, n], h1[n, :])``.
    theta : float array (N,)
        Current phases; updated in place.
    h : complex array (K, M)
        Current effective channel ``sum_n exp(j theta_n) contrib[n]``;
        updated in place.

    Returns
    -------
    float
        ``trace((h h^H)^-1)`` after the pass.
    """
    cdef Py_ssize_t n_el = contrib.shape[0]
    cdef int k = contrib.shape[1]
    cdef int m = contrib.shape[2]
    pm_arr = np.zeros((k, k), dtype=np.complex128)
    qm_arr = np.zeros((k, k), dtype=np.complex128)
    g_arr = np.zeros((k, k), dtype=np.complex128)
    lw_arr = np.zeros((k, k), dtype=np.complex128)
    b_arr = np.zeros((k, m), dtype=np.complex128)
    col_arr = np.zeros(k, dtype=np.complex128)
    cdef double complex[:, ::1] pm = pm_arr
    cdef double complex[:, ::1] qm = qm_arr
    cdef double complex[:, ::1] g = g_arr
    cdef double complex[:, ::1] lw = lw_arr
    cdef double complex[:, ::1] b = b_arr
    cdef double complex[::1] col = col_arr
    cdef Py_ssize_t n
    cdef int i, j, p, gi, it
    cdef double complex e, s
    cdef double step = 2.0 * M_PI / grid
    cdef double f_cur, f_best, th_best, f_grid, th_grid, f_val
    cdef double lo, hi, x1, x2, f1, f2, xm, fm
    cdef double best_total = INFINITY

    with nogil:
        for n in range(n_el):
            e = _cexp(theta[n])
            for i in range(k):
                for p in range(m):
                    b[i, p] = h[i, p] - e * contrib[n, i, p]
            for i in range(k):
                for j in range(k):
                    s = 0.0
                    for p in range(m):
                        s = s + b[i, p] * b[j, p].conjugate() \
                            + contrib[n, i, p] * contrib[n, j, p].conjugate()
                    pm[i, j] = s
                    s = 0.0
                    for p in range(m):
                        s = s + contrib[n, i, p] * b[j, p].conjugate()
                    qm[i, j] = s

            f_cur = _objective(theta[n], pm, qm, g, lw, col, k)
            f_grid = INFINITY
            th_grid = 0.0
            for gi in range(grid):
                f_val = _objective(gi * step, pm, qm, g, lw, col, k)
                if f_val < f_grid:
                    f_grid = f_val
                    th_grid = gi * step
            f_best = f_cur
            th_best = theta[n]
            if f_grid < f_best:
                f_best = f_grid
                th_best = th_grid
            if golden_iters > 0 and f_grid < INFINITY:
                lo = th_grid - step
                hi = th_grid + step
                x1 = hi - GOLDEN * (hi - lo)
                x2 = lo + GOLDEN * (hi - lo)
                f1 = _objective(x1, pm, qm, g, lw, col, k)
                f2 = _objective(x2, pm, qm, g, lw, col, k)
                for it in range(golden_iters):
                    if f1 < f2:
                        hi = x2
                        x2 = x1
                        f2 = f1
                        x1 = hi - GOLDEN * (hi - lo)
                        f1 = _objective(x1, pm, qm, g, lw, col, k)
                    else:
                        lo = x1
                        x1 = x2
                        f1 = f2
                        x2 = lo + GOLDEN * (hi - lo)
                        f2 = _objective(x2, pm, qm, g, lw, col, k)
                xm = 0.5 * (lo + hi)
                fm = _objective(xm, pm, qm, g, lw, col, k)
                if fm < f_best:
                    f_best = fm
                    th_best = xm
            th_best = th_best % (2.0 * M_PI)
            if th_best < 0:
                th_best = th_best + 2.0 * M_PI
            theta[n] = th_best
            e = _cexp(th_best)
            for i in range(k):
                for p in range(m):
                    h[i, p] = b[i, p] + e * contrib[n, i, p]
            best_total = f_best
    return best_total


def trace_inv_gram(double complex[:, ::1] h):
    """``trace((h h^H)^-1)``; ``inf`` if the Gram matrix is not positive definite."""
    cdef int k = h.shape[0]
    cdef int m = h.shape[1]
    g_arr = np.zeros((k, k), dtype=np.complex128)
    lw_arr = np.zeros((k, k), dtype=np.complex128)
    col_arr = np.zeros(k, dtype=np.complex128)
    cdef double complex[:, ::1] g = g_arr
    cdef double complex[:, ::1] lw = lw_arr
    cdef double complex[::1] col = col_arr
    cdef int i, j, p
    cdef double complex s
    cdef double out
    with nogil:
        for i in range(k):
            for j in range(k):
                s = 0.0
                for p in range(m):
                    s = s + h[i, p] * h[j, p].conjugate()
                g[i, j] = s
        out = _trace_inv(g, lw, col, k)
    return out
