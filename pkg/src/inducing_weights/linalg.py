"""Dense float64 linear algebra and seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major).
Vectorisation follows the column-stacking convention: ``vec(A)`` stacks the
columns of ``A``, so ``vec(A X B.T) == kron(B, A) @ vec(X)``.

Normal draws use NumPy's PCG64 generator with its Ziggurat normal sampler.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

SYMMETRY_TOL = 1e-10
DEFAULT_SIZE_CAP = 4096


class LinAlgError(ValueError):
    """Base class for errors raised by this module."""


class ShapeError(LinAlgError):
    pass


class DecompositionError(LinAlgError):
    """Cholesky failed; ``pivot`` is the 1-based index of the bad pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class SingularityError(LinAlgError):
    pass


class SizeCapError(LinAlgError):
    pass


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def symmetrize(a: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Return (A + A^T)/2, rejecting inputs whose asymmetry exceeds ``tol``.

    The tolerance is relative to the largest absolute entry (absolute when
    that entry is below one).
    """
    if type(a) is not np.ndarray or a.ndim != 2 or a.dtype != np.float64:
        a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if n == 0:
        return a.copy()
    at = a.T
    asym = float(np.max(np.abs(a - at)))
    scale = float(np.max(np.abs(a)))
    if not (np.isfinite(asym) and np.isfinite(scale)):
        row = int(np.argmin(np.isfinite(a).all(axis=1))) + 1
        raise DecompositionError(row, "matrix contains non-finite entries")
    if asym > tol * max(1.0, scale):
        raise LinAlgError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    out = a + at
    out *= 0.5
    return out


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == a``.

    Raises
    ------
    DecompositionError
        If a pivot is non-positive or NaN. ``err.pivot`` is 1-based.
    """
    a = symmetrize(a)
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise DecompositionError(int(info))
    if info < 0:
        raise LinAlgError(f"dpotrf argument error {info}")
    return c


def tri_solve(l, b, lower: bool = True, transpose: bool = False) -> np.ndarray:
    """Solve ``op(L) X = B`` where ``op`` is identity or transpose.

    ``lower`` says which triangle of ``l`` holds the factor; the other
    triangle is ignored.
    """
    if type(l) is not np.ndarray or l.ndim != 2:
        l = as_matrix(l)
    if type(b) is not np.ndarray or b.ndim != 2:
        b = as_matrix(b)
    n = l.shape[0]
    if l.shape[1] != n or b.shape[0] != n:
        raise ShapeError(f"incompatible shapes {l.shape} and {b.shape}")
    x, info = lapack.dtrtrs(l, b, lower=int(lower), trans=int(transpose))
    if info > 0:
        raise SingularityError(f"triangular matrix has a zero on its diagonal (row {info})")
    if info < 0:
        raise LinAlgError(f"dtrtrs argument error {info}")
    return x


def spd_inverse(a) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    l = cholesky(a)
    l_inv = tri_solve(l, np.eye(l.shape[0]))
    inv = l_inv.T @ l_inv
    return 0.5 * (inv + inv.T)


def kron(a, b, size_cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    rows, cols = a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]
    if rows > size_cap or cols > size_cap:
        raise SizeCapError(f"kron output {rows}x{cols} exceeds the size cap {size_cap}")
    return np.kron(a, b)


def vec(a: np.ndarray) -> np.ndarray:
    """Stack the columns of the trailing two axes into a column vector."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (-1, 1))


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v)
    lead = v.shape[:-2] if v.ndim >= 2 else ()
    return np.swapaxes(v.reshape(lead + (cols, rows)), -1, -2)


class RngStream:
    """Seeded, splittable normal/uniform source.

    Identical ``(seed, stream_id)`` pairs produce identical sequences; distinct
    stream ids are independent PCG64 streams derived through ``SeedSequence``.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, stream_id: int) -> "RngStream":
        # child ids are kept disjoint from the parent's own id space
        return RngStream(self.seed, (self.stream_id + 1) * 1_000_003 + int(stream_id))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low, high, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def randn(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    return rng.normal((rows, cols))
