"""Pure-numpy reference for the compiled kernels in ``_kernels.pyx``.

Grid candidates are evaluated as one batch; the Cholesky recurrences run
over the (small) user dimension with the batch axis vectorized.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0.6180339887498949
TWO_PI = 2.0 * np.pi


def _trace_inv_batch(g: np.ndarray) -> np.ndarray:
    """``trace(G^-1)`` for a stack ``(B, K, K)``; ``inf`` where not positive definite."""
    nb, k, _ = g.shape
    scale = np.real(np.einsum("bii->b", g))
    bad = ~(scale > 0.0)
    lw = np.zeros_like(g)
    for j in range(k):
        s = g[:, j, j] - np.sum(lw[:, j, :j] * lw[:, j, :j].conj(), axis=1)
        d = s.real
        bad |= ~(d > 1e-13 * scale)
        d = np.sqrt(np.where(bad, 1.0, d))
        lw[:, j, j] = d
        for i in range(j + 1, k):
            s = g[:, i, j] - np.sum(lw[:, i, :j] * lw[:, j, :j].conj(), axis=1)
            lw[:, i, j] = s / d
    tr = np.zeros(nb)
    col = np.zeros((nb, k), dtype=np.complex128)
    diag = np.real(np.einsum("bii->bi", lw))
    for j in range(k):
        col[:] = 0.0
        for i in range(j, k):
            s = (1.0 if i == j else 0.0) - np.sum(lw[:, i, j:i] * col[:, j:i], axis=1)
            col[:, i] = s / diag[:, i]
            tr += col[:, i].real ** 2 + col[:, i].imag ** 2
    tr[bad] = np.inf
    return tr


def _objective(thetas, pm, qm) -> np.ndarray:
    e = np.exp(1j * np.atleast_1d(np.asarray(thetas, dtype=np.float64)))
    g = pm[None] + e[:, None, None] * qm[None] + e.conj()[:, None, None] * qm.conj().T[None]
    return _trace_inv_batch(g)


def sfp_sweep(contrib: np.ndarray, theta: np.ndarray, h: np.ndarray,
              grid: int, golden_iters: int) -> float:
    """One pass of per-element phase updates; ``theta`` and ``h`` are updated in place."""
    n_el = contrib.shape[0]
    step = TWO_PI / grid
    grid_thetas = np.arange(grid) * step
    best_total = np.inf
    for n in range(n_el):
        c = contrib[n]
        b = h - np.exp(1j * theta[n]) * c
        pm = b @ b.conj().T + c @ c.conj().T
        qm = c @ b.conj().T

        f_cur = _objective(theta[n], pm, qm)[0]
        fg = _objective(grid_thetas, pm, qm)
        # first minimum, as in the compiled strict-less scan
        gi = int(np.argmin(fg))
        f_grid, th_grid = fg[gi], grid_thetas[gi]
        f_best, th_best = f_cur, theta[n]
        if f_grid < f_best:
            f_best, th_best = f_grid, th_grid
        if golden_iters > 0 and np.isfinite(f_grid):
            lo, hi = th_grid - step, th_grid + step
            x1 = hi - GOLDEN * (hi - lo)
            x2 = lo + GOLDEN * (hi - lo)
            f1 = _objective(x1, pm, qm)[0]
            f2 = _objective(x2, pm, qm)[0]
            for _ in range(golden_iters):
                if f1 < f2:
                    hi, x2, f2 = x2, x1, f1
                    x1 = hi - GOLDEN * (hi - lo)
                    f1 = _objective(x1, pm, qm)[0]
                else:
                    lo, x1, f1 = x1, x2, f2
                    x2 = lo + GOLDEN * (hi - lo)
                    f2 = _objective(x2, pm, qm)[0]
            xm = 0.5 * (lo + hi)
            fm = _objective(xm, pm, qm)[0]
            if fm < f_best:
                f_best, th_best = fm, xm
        th_best = th_best % TWO_PI
        theta[n] = th_best
        h[:] = b + np.exp(1j * th_best) * c
        best_total = float(f_best)
    return best_total


def trace_inv_gram(h: np.ndarray) -> float:
    h = np.asarray(h, dtype=np.complex128)
    return float(_trace_inv_batch((h @ h.conj().T)[None])[0])
