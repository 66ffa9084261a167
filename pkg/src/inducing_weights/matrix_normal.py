"""Matrix-normal machinery for the inducing-weight prior.

The augmented prior over a weight matrix ``W`` (d_out x d_in) and its inducing
matrix ``U`` (M_out x M_in) is matrix normal with row and column factors

    L_r = [[sigma_r I, 0], [Z_r, D_r]],   L_c = [[sigma_c I, 0], [Z_c, D_c]].

Marginally ``W ~ MN(0, sigma_r^2 I, sigma_c^2 I)`` whatever ``Z`` and ``D`` are,
and ``U ~ MN(0, Psi_r, Psi_c)`` with ``Psi = Z Z^T + D^2``.

Functions that appear in the training objective (``psi``, ``whiten_u``,
``kl_diag_normal`` and friends) are written with :mod:`autodiff` ops, so they
accept either arrays or tape variables.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .linalg import RngStream, ShapeError


class DomainError(ValueError):
    pass


@dataclass
class MatrixNormal:
    """``MN(mean, L_r L_r^T, L_c L_c^T)``; vec-covariance is ``Sigma_c kron Sigma_r``."""

    mean: np.ndarray
    row_chol: np.ndarray
    col_chol: np.ndarray

    def __post_init__(self):
        self.mean = linalg.as_matrix(self.mean)
        self.row_chol = linalg.as_matrix(self.row_chol)
        self.col_chol = linalg.as_matrix(self.col_chol)
        n, p = self.mean.shape
        if self.row_chol.shape != (n, n) or self.col_chol.shape != (p, p):
            raise ShapeError("factor shapes do not match the mean")
        for f in (self.row_chol, self.col_chol):
            if np.any(np.triu(f, 1) != 0.0) or np.any(np.diag(f) <= 0.0):
                raise DomainError("factors must be lower triangular with positive diagonal")

    def vec_covariance(self, size_cap: int = linalg.DEFAULT_SIZE_CAP) -> np.ndarray:
        return linalg.kron(self.col_chol @ self.col_chol.T, self.row_chol @ self.row_chol.T, size_cap)

    def sample(self, rng: RngStream, n: int | None = None) -> np.ndarray:
        shape = self.mean.shape if n is None else (n,) + self.mean.shape
        e = rng.normal(shape)
        return self.mean + self.row_chol @ e @ self.col_chol.T


def mn_sample(dist: MatrixNormal, rng: RngStream, n: int | None = None) -> np.ndarray:
    return dist.sample(rng, n)


@dataclass
class InducingPrior:
    """Parameters of the augmented prior for one layer.

    ``D_r`` and ``D_c`` hold the diagonals of the D matrices as 1-D arrays.
    """

    d_in: int
    d_out: int
    M_in: int
    M_out: int
    sigma_r: float
    sigma_c: float
    Z_r: np.ndarray
    Z_c: np.ndarray
    D_r: np.ndarray
    D_c: np.ndarray

    def __post_init__(self):
        for name in ("d_in", "d_out", "M_in", "M_out"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.sigma_r <= 0 or self.sigma_c <= 0:
            raise DomainError("sigma_r and sigma_c must be positive")
        self.Z_r = np.asarray(self.Z_r, dtype=np.float64)
        self.Z_c = np.asarray(self.Z_c, dtype=np.float64)
        self.D_r = np.asarray(self.D_r, dtype=np.float64).reshape(-1)
        self.D_c = np.asarray(self.D_c, dtype=np.float64).reshape(-1)
        if self.Z_r.shape != (self.M_out, self.d_out) or self.Z_c.shape != (self.M_in, self.d_in):
            raise ShapeError(
                f"Z_r must be {self.M_out}x{self.d_out} and Z_c {self.M_in}x{self.d_in}, "
                f"got {self.Z_r.shape} and {self.Z_c.shape}"
            )
        if self.D_r.shape != (self.M_out,) or self.D_c.shape != (self.M_in,):
            raise ShapeError("D_r and D_c must have lengths M_out and M_in")
        if np.any(self.D_r <= 0) or np.any(self.D_c <= 0):
            raise DomainError("D diagonals must be positive")

    @property
    def sigma(self) -> float:
        return self.sigma_r * self.sigma_c

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.sigma_r, self.sigma_c], dtype="<f8").tobytes())
        for a in (self.Z_r, self.Z_c, self.D_r, self.D_c):
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def random(cls, d_out, d_in, M_out, M_in, rng: RngStream, sigma_r=1.0, sigma_c=1.0, d_scale=1.0):
        """A generic valid prior, handy for tests."""
        return cls(
            d_in=d_in, d_out=d_out, M_in=M_in, M_out=M_out, sigma_r=sigma_r, sigma_c=sigma_c,
            Z_r=rng.normal((M_out, d_out)), Z_c=rng.normal((M_in, d_in)),
            D_r=d_scale * (0.5 + rng.uniform(0, 1, M_out)),
            D_c=d_scale * (0.5 + rng.uniform(0, 1, M_in)),
        )


def psi_from(z, d):
    """``Z Z^T + diag(d)^2`` for a Z matrix and a 1-D diagonal."""
    return ad.gram_diag(z, d)


def psi(prior: InducingPrior) -> tuple[np.ndarray, np.ndarray]:
    return psi_from(prior.Z_r, prior.D_r), psi_from(prior.Z_c, prior.D_c)


def joint_vec_covariance(prior: InducingPrior, size_cap: int = linalg.DEFAULT_SIZE_CAP) -> np.ndarray:
    """Covariance of ``(vec W, vec U)`` under the augmented prior (oracle only)."""
    nw = prior.d_in * prior.d_out
    nu = prior.M_in * prior.M_out
    if nw + nu > size_cap:
        raise linalg.SizeCapError(f"joint dimension {nw + nu} exceeds the size cap {size_cap}")
    psi_r, psi_c = psi(prior)
    out = np.zeros((nw + nu, nw + nu))
    out[:nw, :nw] = linalg.kron(
        prior.sigma_c ** 2 * np.eye(prior.d_in), prior.sigma_r ** 2 * np.eye(prior.d_out), size_cap
    )
    cross = linalg.kron(prior.sigma_c * prior.Z_c, prior.sigma_r * prior.Z_r, size_cap)
    out[nw:, :nw] = cross
    out[:nw, nw:] = cross.T
    out[nw:, nw:] = linalg.kron(psi_c, psi_r, size_cap)
    return out


def conditional_projections(prior: InducingPrior) -> tuple[np.ndarray, np.ndarray]:
    """``P_r = sigma Z_r^T Psi_r^-1`` and ``P_c = Psi_c^-1 Z_c``."""
    psi_r, psi_c = psi(prior)
    p_r = prior.sigma * prior.Z_r.T @ linalg.spd_inverse(psi_r)
    p_c = linalg.spd_inverse(psi_c) @ prior.Z_c
    return p_r, p_c


def naive_conditional_moments(
    prior: InducingPrior, u, lam: float, size_cap: int = linalg.DEFAULT_SIZE_CAP
) -> tuple[np.ndarray, np.ndarray]:
    """Mean (d_out x d_in) and vec-covariance of ``q(W | U)``.

    The covariance is ``lam^2 sigma^2 (I - Z_c^T Psi_c^-1 Z_c kron Z_r^T Psi_r^-1 Z_r)``;
    ``lam = 1`` gives the prior conditional ``p(W | U)``.
    """
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    n = prior.d_in * prior.d_out
    if n > size_cap:
        raise linalg.SizeCapError(f"vec(W) dimension {n} exceeds the size cap {size_cap}")
    u = linalg.as_matrix(u)
    if u.shape != (prior.M_out, prior.M_in):
        raise ShapeError(f"u must be {prior.M_out}x{prior.M_in}, got {u.shape}")
    p_r, p_c = conditional_projections(prior)
    mean = p_r @ u @ p_c
    q_r = prior.Z_r.T @ (p_r.T / prior.sigma)
    q_c = prior.Z_c.T @ p_c
    cov = lam ** 2 * prior.sigma ** 2 * (np.eye(n) - linalg.kron(q_c, q_r, size_cap))
    return mean, 0.5 * (cov + cov.T)


def conditional_kl_R(lam, d_in: int, d_out: int):
    """KL between the lambda-rescaled conditional and the prior conditional.

    Equals ``d_in * d_out * (lam^2 / 2 - log lam - 1/2)``. Accepts a tape variable.
    """
    lv = np.asarray(ad.value(lam))
    if np.any(lv <= 0):
        raise DomainError("lambda must be positive")
    return ad.scaled_kl_ratio(lam, float(d_in * d_out))


def whiten_u(prior: InducingPrior, u_white):
    """Map a whitened ``U~`` to ``U = chol(Psi_r) U~ chol(Psi_c)^T``."""
    psi_r, psi_c = psi(prior)
    return whiten_with(linalg.cholesky(psi_r), linalg.cholesky(psi_c), u_white)


def whiten_with(l_r, l_c, u_white):
    return ad.matmul3(l_r, u_white, l_c, tc=True)


def unwhiten_u(prior: InducingPrior, u) -> np.ndarray:
    psi_r, psi_c = psi(prior)
    l_r, l_c = linalg.cholesky(psi_r), linalg.cholesky(psi_c)
    a = linalg.tri_solve(l_r, linalg.as_matrix(u))
    return linalg.tri_solve(l_c, a.T).T


def kl_diag_normal(mean, var, prior_var=1.0):
    """KL( N(mean, diag(var)) || N(0, prior_var I) ), summed over entries."""
    return ad.kl_diag_gauss(mean, var, prior_var)


def kl_full_normal_iso(mean, chol, prior_var=1.0):
    """KL( N(mean, L L^T) || N(0, prior_var I) ) for a column ``mean`` and lower ``L``."""
    n = np.shape(ad.value(mean))[0]
    trace = ad.div(ad.sum(ad.square(chol)), prior_var)
    maha = ad.div(ad.sum(ad.square(mean)), prior_var)
    logdet_q = ad.sum(ad.log(ad.square(ad.diag_part(chol))))
    val = ad.sub(ad.add(trace, maha), logdet_q)
    return ad.mul(ad.add(val, n * np.log(prior_var) - n), 0.5)


def gaussian_kl(m0, s0, m1, s1) -> float:
    """KL( N(m0, S0) || N(m1, S1) ) for dense covariances (oracle helper)."""
    m0, m1 = linalg.as_matrix(m0), linalg.as_matrix(m1)
    s0, s1 = linalg.as_matrix(s0), linalg.as_matrix(s1)
    n = s0.shape[0]
    l1 = linalg.cholesky(s1)
    l0 = linalg.cholesky(s0)
    a = linalg.tri_solve(l1, l0)
    b = linalg.tri_solve(l1, m1 - m0)
    logdet = 2.0 * (np.sum(np.log(np.diag(l1))) - np.sum(np.log(np.diag(l0))))
    return 0.5 * (float(np.sum(a * a)) + float(np.sum(b * b)) - n + logdet)
