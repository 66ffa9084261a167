"""Sampling ``q(W | U)`` with the extended Matheron rule.

For the augmented matrix-normal prior a conditional sample is obtained by
correcting a joint prior sample ``(W_bar, U_bar)``:

    W = lam * W_bar + sigma Z_r^T Psi_r^-1 (U - lam * U_bar) Psi_c^-1 Z_c,

with the low-variance joint draw

    W_bar = sigma E1,
    U_bar = Z_r E1 Z_c^T + Lh_r E2 D_c + D_r E3 Lh_c^T + D_r E4 D_c,

where ``Lh = chol(Z Z^T)``. All matrices involved are at most
``max(d, M) x max(d, M)``; no Kronecker product is ever formed.

``naive_conditional_sample`` and ``matheron_original`` work on the full
vectorised Gaussian and exist as oracles and benchmark baselines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .linalg import RngStream, ShapeError
from .matrix_normal import DomainError, InducingPrior, naive_conditional_moments, psi, psi_from

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class SamplerSetupError(RuntimeError):
    pass


class CacheInvalidError(RuntimeError):
    pass


@dataclass
class JointNoise:
    """Standard-normal blocks ``E1`` (d_out x d_in) and ``E2, E3, E4`` (M_out x M_in).

    Blocks may carry a leading sample axis.
    """

    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray
    E4: np.ndarray

    @classmethod
    def draw(cls, rng: RngStream, d_out, d_in, M_out, M_in, n: int | None = None) -> "JointNoise":
        lead = () if n is None else (n,)
        return cls(
            E1=rng.normal(lead + (d_out, d_in)),
            E2=rng.normal(lead + (M_out, M_in)),
            E3=rng.normal(lead + (M_out, M_in)),
            E4=rng.normal(lead + (M_out, M_in)),
        )

    @classmethod
    def for_prior(cls, prior: InducingPrior, rng: RngStream, n: int | None = None) -> "JointNoise":
        return cls.draw(rng, prior.d_out, prior.d_in, prior.M_out, prior.M_in, n)


def jitter_levels(gram) -> list[float]:
    """The escalation ladder: 0, then ``c * trace / M`` for c = 1e-8, 1e-7, ..., 1e-4."""
    m = gram.shape[0]
    scale = max(float(np.trace(gram)) / m, np.finfo(float).tiny)
    levels = [0.0]
    c = JITTER_START
    while c <= JITTER_MAX * (1 + 1e-9):
        levels.append(c * scale)
        c *= 10.0
    return levels


def jittered_cholesky(gram):
    """Cholesky of ``gram`` plus the smallest ladder jitter that makes it factorisable.

    Returns ``(L, jitter)``; works on arrays and tape variables.
    """
    gv = np.asarray(ad.value(gram))
    m = gv.shape[0]
    levels = jitter_levels(gv)
    floor = 1e-12 * np.sqrt(levels[-1] / JITTER_MAX)
    for jit in levels:
        try:
            l = ad.cholesky(ad.add(gram, jit * np.eye(m)) if jit else gram)
        except linalg.LinAlgError:
            continue
        # a factor with a vanishing pivot would give useless gradients
        if np.min(np.diag(ad.value(l))) > floor:
            return l, jit
    raise SamplerSetupError(f"Z Z^T is not factorisable even with jitter {JITTER_MAX:g} * trace/M")


def choose_jitter(gram: np.ndarray) -> float:
    return jittered_cholesky(np.asarray(gram, dtype=np.float64))[1]


@dataclass
class SamplerParts:
    """Everything the extended rule needs, as arrays or tape variables.

    ``L_r, L_c`` factor Psi_r, Psi_c; ``A = L^-1 Z``; ``P_r = sigma Z_r^T Psi_r^-1``
    and ``P_c = Psi_c^-1 Z_c``; ``L_hat = chol(Z Z^T)`` (jittered if needed).
    """

    sigma: object
    Z_r: object
    Z_c: object
    D_r: object
    D_c: object
    L_r: object
    L_c: object
    A_r: object
    A_c: object
    L_hat_r: object
    L_hat_c: object
    P_r: object
    P_c: object
    jitter_r: float = 0.0
    jitter_c: float = 0.0


def build_parts(sigma, z_r, z_c, d_r, d_c, psi_r=None, psi_c=None) -> SamplerParts:
    """Assemble :class:`SamplerParts` from prior parameters (tape-aware)."""
    if psi_r is None:
        psi_r = psi_from(z_r, d_r)
    if psi_c is None:
        psi_c = psi_from(z_c, d_c)
    try:
        l_r = ad.cholesky(psi_r)
        l_c = ad.cholesky(psi_c)
    except linalg.LinAlgError as exc:
        raise SamplerSetupError(f"Psi is not positive definite: {exc}") from exc
    a_r = ad.tri_solve(l_r, z_r)
    a_c = ad.tri_solve(l_c, z_c)
    p_r = ad.mul(ad.mT(ad.tri_solve(l_r, a_r, transpose=True)), sigma)
    p_c = ad.tri_solve(l_c, a_c, transpose=True)
    l_hat_r, jit_r = jittered_cholesky(ad.matmul(z_r, z_r, tb=True))
    l_hat_c, jit_c = jittered_cholesky(ad.matmul(z_c, z_c, tb=True))
    return SamplerParts(sigma, z_r, z_c, d_r, d_c, l_r, l_c, a_r, a_c, l_hat_r, l_hat_c, p_r, p_c, jit_r, jit_c)


@dataclass
class SamplerCache:
    """Precomputed factors for one prior; valid only for that prior's values."""

    fingerprint: str
    parts: SamplerParts = field(repr=False)
    psi_r_inv: np.ndarray = field(repr=False, default=None)
    psi_c_inv: np.ndarray = field(repr=False, default=None)

    @property
    def L_hat_r(self):
        return self.parts.L_hat_r

    @property
    def L_hat_c(self):
        return self.parts.L_hat_c

    @property
    def P_r(self):
        return self.parts.P_r

    @property
    def P_c(self):
        return self.parts.P_c

    def check(self, prior: InducingPrior) -> None:
        if prior.fingerprint() != self.fingerprint:
            raise CacheInvalidError("sampler cache was built for different prior parameters")


def build_cache(prior: InducingPrior) -> SamplerCache:
    parts = build_parts(prior.sigma, prior.Z_r, prior.Z_c, prior.D_r, prior.D_c)
    psi_r, psi_c = psi(prior)
    return SamplerCache(prior.fingerprint(), parts, linalg.spd_inverse(psi_r), linalg.spd_inverse(psi_c))


def joint_bar_from_parts(parts: SamplerParts, noise: JointNoise):
    w_bar = ad.mul(noise.E1, parts.sigma)
    u_bar = ad.matmul3(parts.Z_r, noise.E1, parts.Z_c, tc=True)
    u_bar = ad.add(u_bar, ad.diag_scale(None, ad.matmul(parts.L_hat_r, noise.E2), parts.D_c))
    u_bar = ad.add(u_bar, ad.diag_scale(parts.D_r, ad.matmul(noise.E3, parts.L_hat_c, tb=True), None))
    u_bar = ad.add(u_bar, ad.diag_scale(parts.D_r, noise.E4, parts.D_c))
    return w_bar, u_bar


def matheron_from_parts(parts: SamplerParts, u, lam, noise: JointNoise | None):
    """The extended rule on (possibly taped) parts; batches over leading axes.

    ``lam`` may be the float 0, in which case ``noise`` is ignored.
    """
    if isinstance(lam, float) and lam == 0.0:
        return conditional_mean_from_parts(parts, u)
    w_bar, u_bar = joint_bar_from_parts(parts, noise)
    resid = ad.sub(u, ad.mul(u_bar, lam))
    corr = ad.matmul3(parts.P_r, resid, parts.P_c)
    return ad.add(ad.mul(w_bar, lam), corr)


def matheron_whitened(parts: SamplerParts, u_white, lam, noise: JointNoise | None):
    """Same draw as :func:`matheron_from_parts` for ``U = L_r U~ L_c^T``.

    The mean term collapses to ``sigma A_r^T U~ A_c``, so U is never formed.
    """
    mean = ad.mul(ad.matmul3(parts.A_r, u_white, parts.A_c, ta=True), parts.sigma)
    if isinstance(lam, float) and lam == 0.0:
        return mean
    w_bar, u_bar = joint_bar_from_parts(parts, noise)
    noise_term = ad.sub(w_bar, ad.matmul3(parts.P_r, u_bar, parts.P_c))
    return ad.add(mean, ad.mul(noise_term, lam))


def conditional_mean_from_parts(parts: SamplerParts, u):
    return ad.matmul3(parts.P_r, u, parts.P_c)


def _check_noise(prior: InducingPrior, noise: JointNoise):
    if noise.E1.shape[-2:] != (prior.d_out, prior.d_in):
        raise ShapeError(f"E1 must be {prior.d_out}x{prior.d_in}, got {noise.E1.shape[-2:]}")
    for blk in (noise.E2, noise.E3, noise.E4):
        if blk.shape[-2:] != (prior.M_out, prior.M_in):
            raise ShapeError(f"E2..E4 must be {prior.M_out}x{prior.M_in}, got {blk.shape[-2:]}")


def sample_joint_bar(prior: InducingPrior, noise: JointNoise, cache: SamplerCache | None = None):
    """A joint prior draw ``(W_bar, U_bar)`` of the augmented prior."""
    _check_noise(prior, noise)
    if cache is None:
        cache = build_cache(prior)
    cache.check(prior)
    return joint_bar_from_parts(cache.parts, noise)


def matheron_extended(prior: InducingPrior, u, lam: float, noise: JointNoise, cache: SamplerCache) -> np.ndarray:
    """One (or a batch of) exact draws from ``q(W | U)``."""
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    cache.check(prior)
    _check_noise(prior, noise)
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-2:] != (prior.M_out, prior.M_in):
        raise ShapeError(f"u must be {prior.M_out}x{prior.M_in}, got {u.shape}")
    return matheron_from_parts(cache.parts, u, lam, noise)


def matheron_original(sigma_joint, n_w: int, u, rng: RngStream, n: int | None = None) -> np.ndarray:
    """Classic Matheron rule on an explicit joint covariance over ``(w, u)``.

    Returns column vector(s) of length ``n_w``: ``w_bar + S_wu S_uu^-1 (u - u_bar)``.
    """
    sigma_joint = linalg.as_matrix(sigma_joint)
    total = sigma_joint.shape[0]
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    if not 0 < n_w < total or u.shape[0] != total - n_w:
        raise ShapeError("partition sizes do not match the joint covariance and u")
    l = linalg.cholesky(sigma_joint)
    eps = rng.normal((total, 1 if n is None else n))
    joint = l @ eps
    w_bar, u_bar = joint[:n_w], joint[n_w:]
    s_uu = sigma_joint[n_w:, n_w:]
    gain = linalg.tri_solve(linalg.cholesky(s_uu), sigma_joint[n_w:, :n_w])
    gain = linalg.tri_solve(linalg.cholesky(s_uu), gain, transpose=True)  # S_uu^-1 S_uw
    out = w_bar + gain.T @ (u - u_bar)
    return out if n is None else out.T[..., None]


def naive_conditional_sample(
    prior: InducingPrior, u, lam: float, rng: RngStream, n: int | None = None,
    size_cap: int = linalg.DEFAULT_SIZE_CAP,
) -> np.ndarray:
    """Sample ``q(W | U)`` by factorising the full conditional covariance."""
    mean, cov = naive_conditional_moments(prior, u, max(lam, 0.0), size_cap)
    if lam == 0.0:
        return mean if n is None else np.broadcast_to(mean, (n,) + mean.shape).copy()
    l = linalg.cholesky(cov)
    nw = cov.shape[0]
    eps = rng.normal((nw, 1 if n is None else n))
    draws = (l @ eps).T  # (n, nw)
    w = linalg.unvec(draws[..., None], prior.d_out, prior.d_in) + mean
    return w[0] if n is None else w


def benchmark(prior: InducingPrior, method: str, n: int, rng: RngStream, lam: float = 1.0) -> dict:
    """Time ``n`` conditional draws and report a JSON-ready record."""
    u = rng.normal((prior.M_out, prior.M_in))
    shape = [prior.d_out, prior.d_in, prior.M_out, prior.M_in]
    if method == "extended":
        cache = build_cache(prior)
        t0 = time.perf_counter_ns()
        noise = JointNoise.for_prior(prior, rng, n)
        matheron_extended(prior, u, lam, noise, cache)
        elapsed = time.perf_counter_ns() - t0
    elif method == "naive":
        t0 = time.perf_counter_ns()
        naive_conditional_sample(prior, u, lam, rng, n)
        elapsed = time.perf_counter_ns() - t0
    else:
        raise ValueError(f"unknown benchmark method {method!r}")
    return {"shape": shape, "method": method, "ns_per_sample": elapsed / n}
