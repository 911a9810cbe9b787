"""Complex-matrix helpers and seeded random streams.

Matrices are plain ``numpy`` arrays of dtype ``complex128`` stored row-major
(C order).  The helpers here add the dimension checks and the robust
Hermitian solve the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "DimensionError",
    "SingularSystemError",
    "Rng",
    "SolveInfo",
    "as_cmatrix",
    "matmul",
    "hermitian",
    "solve_hermitian_system",
    "draw_cn",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when a Hermitian system cannot be factorized even after regularization."""


def as_cmatrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D C-ordered complex128 array."""
    arr = np.asarray(a, dtype=np.complex128)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array with shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b) -> np.ndarray:
    a = as_cmatrix(a)
    b = as_cmatrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hermitian(a) -> np.ndarray:
    """Conjugate transpose."""
    return np.ascontiguousarray(as_cmatrix(a).conj().T)


@dataclass(frozen=True)
class SolveInfo:
    regularized: bool
    epsilon: float


def solve_hermitian_system(a, b, return_info: bool = False):
    """Solve ``a @ x = b`` for Hermitian positive definite ``a``.

    A Cholesky factorization is attempted first.  If it fails, the diagonal
    is loaded with ``eps = 1e-12 * trace(a) / n`` and the factorization is
    retried once; ``SolveInfo.regularized`` reports that this happened.

    Parameters
    ----------
    a : array_like, shape (n, n)
    b : array_like, shape (n, k)
    return_info : bool
        Also return a :class:`SolveInfo`.

    Raises
    ------
    SingularSystemError
        If ``a`` is not positive definite even after regularization.
    """
    a = as_cmatrix(a)
    b = np.asarray(b, dtype=np.complex128)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b.reshape(-1, 1)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"system matrix must be square, got {a.shape}")
    if b.shape[0] != n:
        raise DimensionError(f"right-hand side has {b.shape[0]} rows, expected {n}")
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
        raise SingularSystemError("non-finite entries in linear system")

    eps = 0.0
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        eps = 1e-12 * float(np.real(np.trace(a))) / n
        if not eps > 0.0:
            raise SingularSystemError("matrix is not positive definite") from None
        try:
            factor = scipy.linalg.cho_factor(
                a + eps * np.eye(n), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                "matrix is not positive definite after regularization"
            ) from None
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("solution is not finite")
    if vector_rhs:
        x = x.ravel()
    if return_info:
        return x, SolveInfo(regularized=eps > 0.0, epsilon=eps)
    return x


class Rng:
    """Deterministic, splittable random stream.

    Backed by the counter-based Philox generator.  The key is derived from
    ``(seed, *path)`` through :class:`numpy.random.SeedSequence`, so
    ``Rng(7).split(3)`` always yields the same stream regardless of how many
    draws were taken from ``Rng(7)`` first.

    Parameters
    ----------
    seed : int
        Non-negative master seed (64-bit).
    path : tuple of int
        Stream identifiers appended by :meth:`split`.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.path + (int(stream_id),))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def draw_cn(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """Draw a ``rows x cols`` matrix of i.i.d. CN(0, 1) entries."""
    if rows < 1 or cols < 1:
        raise DimensionError("rows and cols must be >= 1")
    parts = rng.normal((2, rows, cols))
    return (parts[0] + 1j * parts[1]) * np.sqrt(0.5)
