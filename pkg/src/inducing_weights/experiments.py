"""End-to-end experiment drivers: toy regression and two-moons classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import metrics
from .datasets import gen_ood_uniform, gen_toy_regression, gen_two_moons
from .layers import VARIANTS, Likelihood, Network, VariantConfig
from .linalg import RngStream, vec
from .matrix_normal import InducingPrior, naive_conditional_moments
from .sampler import JointNoise, benchmark, build_cache, matheron_extended
from .trainer import TrainConfig, prune_z, train

TOY_GAP = (-0.2, 0.2)
TOY_DEFAULTS = {"K": 8, "lambda_init": 0.1}


def toy_network(variant: str, seed: int, hidden: int = 50, **overrides) -> Network:
    """1 -> hidden -> 1 tanh network with prior std 4/sqrt(d_in) per layer."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    shapes = [(1, hidden, 2, 25), (hidden, 1, 25, 1)]
    configs = [
        VariantConfig(kind=variant, prior_std=4.0 / math.sqrt(d_in), M_in=m_in, M_out=m_out,
                      **{**TOY_DEFAULTS, **overrides})
        for d_in, _, m_in, m_out in shapes
    ]
    return Network.mlp([1, hidden, 1], configs, ["tanh", "identity"], Likelihood("gaussian", 0.01),
                       RngStream(seed, 7))


@dataclass
class ToyResult:
    variant: str
    seed: int
    ratio: float
    std_gap: float
    std_train: float
    final: dict
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    def summary(self) -> dict:
        return {
            "variant": self.variant, "seed": self.seed, "ratio": self.ratio,
            "std_gap": self.std_gap, "std_train": self.std_train, "final": self.final,
        }


def toy_ratio(network: Network, X_train, rng: RngStream, mc: int = 200, n_gap: int = 41):
    """Mean predictive std on the gap interval over mean std at the training inputs."""
    gap = np.linspace(*TOY_GAP, n_gap)[None, :]
    _, s_gap = metrics.predict(network, gap, mc, rng)
    _, s_tr = metrics.predict(network, X_train, mc, rng)
    g, t = float(s_gap.mean()), float(s_tr.mean())
    return g / t, g, t


def run_toy_regression(variant: str, seed: int = 0, steps: int = 20000, n_samples: int = 32,
                       lr: float = 1e-3, target: str = "main", mc: int = 200, log_path=None,
                       **overrides) -> ToyResult:
    data = gen_toy_regression(seed, variant=target)
    net = toy_network(variant, seed, **overrides)
    decay = steps // 2 if variant in ("fcg_u", "ensemble_u") else None
    cfg = TrainConfig(epochs=steps, lr=lr, n_samples=n_samples, seed=seed, lr_decay_epoch=decay,
                      log_every=max(1, steps // 20))
    log = train(net, data.X, data.Y, cfg, log_path=log_path)
    rng = RngStream(seed, 9)
    ratio, g, t = toy_ratio(net, data.X, rng.split(0), mc)
    grid = np.linspace(-2.0, 2.0, 201)[None, :]
    mean, std = metrics.predict(net, grid, mc, rng.split(1))
    final = {k: v for k, v in log[-1].items() if k != "wall_ms"}
    return ToyResult(variant, seed, ratio, g, t, final, grid[0], mean[0], std[0], data.X[0], data.Y[0])


def toy_svg(result: ToyResult, width: int = 640, height: int = 400) -> str:
    """Static SVG 1.1 plot: predictive mean, a +-3 std band and the data."""
    x0, x1, y0, y1 = -2.0, 2.0, -3.0, 3.0
    pad = 40

    def px(x):
        return pad + (np.asarray(x) - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (np.clip(y, y0, y1) - y0) / (y1 - y0) * (height - 2 * pad)

    def path(xs, ys):
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(xs), py(ys)))

    g, m, s = result.grid, result.mean, result.std
    band = path(g, m + 3 * s) + " " + path(g[::-1], (m - 3 * s)[::-1])
    dots = "\n".join(
        f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="#d62728"/>' for a, b in zip(px(result.X), py(result.Y))
    )
    title = escape(f"{result.variant} seed {result.seed}: gap/train std ratio {result.ratio:.3f}")
    return f"""<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">
<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>
<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>
<polygon points="{band}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>
<polyline points="{path(g, m)}" fill="none" stroke="#1f77b4" stroke-width="2"/>
{dots}
<text x="{pad}" y="{pad - 12}" font-family="sans-serif" font-size="14">{title}</text>
<text x="{pad}" y="{height - 12}" font-family="sans-serif" font-size="11">x from {x0} to {x1}; y from {y0} to {y1}</text>
</svg>
"""


# ---------------------------------------------------------------- two moons

MOONS_VARIANT_DEFAULTS = {
    "ffg_u": {"sigma_max": 0.3, "lambda_max": 0.1},
    "ensemble_u": {"lambda_max": 0.1},
}


def moons_network(variant: str, seed: int, hidden: int = 32, M: int = 8, K: int = 5,
                  prior_std: float = 1.0, **overrides) -> Network:
    extra = {**MOONS_VARIANT_DEFAULTS.get(variant, {}), **overrides}
    widths = [2, hidden, hidden, 2]
    configs = []
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        m_in = min(M, d_in + 1)
        m_out = min(M, d_out)
        configs.append(VariantConfig(kind=variant, prior_std=prior_std, M_in=m_in, M_out=m_out, K=K, **extra))
    return Network.mlp(widths, configs, ["tanh", "tanh", "identity"], Likelihood("categorical"),
                       RngStream(seed, 11))


@dataclass
class MoonsSetup:
    n: int = 1000
    noise: float = 0.1
    epochs: int = 200
    batch_size: int = 100
    lr: float = 3e-3
    warmup_epochs: int = 20
    ramp_epochs: int = 60
    mc: int = 20
    n_ood: int = 1000


def moons_data(seed: int, setup: MoonsSetup):
    train_d = gen_two_moons(setup.n, setup.noise, seed)
    test_d = gen_two_moons(setup.n, setup.noise, seed + 10_000)
    ood = gen_ood_uniform(setup.n_ood, seed=seed)
    return train_d, test_d, ood


def evaluate_moons(net: Network, test_d, ood, mc: int, seed: int) -> metrics.MetricsReport:
    rng = RngStream(seed, 13)
    p_in = metrics.predict(net, test_d.X, mc, rng.split(0))
    p_out = metrics.predict(net, ood, mc, rng.split(1))
    return metrics.classification_report(p_in, test_d.Y, p_out)


def run_moons(variant: str, seed: int = 0, setup: MoonsSetup | None = None, log_path=None, **net_kw):
    """Train on two moons; returns the network and its test/OOD report."""
    setup = setup or MoonsSetup()
    train_d, test_d, ood = moons_data(seed, setup)
    net = moons_network(variant, seed, **net_kw)
    cfg = TrainConfig(epochs=setup.epochs, lr=setup.lr, batch_size=setup.batch_size, n_samples=1, seed=seed,
                      warmup_epochs=setup.warmup_epochs, ramp_epochs=setup.ramp_epochs,
                      log_every=max(1, setup.epochs // 10))
    train(net, train_d.X, train_d.Y, cfg, log_path=log_path)
    return net, evaluate_moons(net, test_d, ood, setup.mc, seed)


def run_moons_pruning(seed: int = 0, fraction: float = 0.5, finetune_epochs: int = 50,
                      setup: MoonsSetup | None = None) -> dict:
    """Accuracy and parameter counts before and after Z pruning plus fine-tuning."""
    setup = setup or MoonsSetup()
    train_d, test_d, ood = moons_data(seed, setup)
    net, before = run_moons("ffg_u", seed, setup)
    pruned, masks = prune_z(net, fraction)
    zeroed = int(sum((m == 0).sum() for m in masks.values()))
    cfg = TrainConfig(epochs=finetune_epochs, lr=setup.lr * 0.3, batch_size=setup.batch_size, n_samples=1,
                      seed=seed + 1, log_every=finetune_epochs)
    train(pruned, train_d.X, train_d.Y, cfg)
    after = evaluate_moons(pruned, test_d, ood, setup.mc, seed)
    return {
        "acc_before": before.accuracy, "acc_after": after.accuracy,
        "params_before": net.n_params(), "params_after": pruned.n_params(), "zeroed": zeroed,
    }


# ---------------------------------------------------------------- sampler check

def moment_check(shape, draws: int, lam: float = 1.0, seed: int = 0, chunk: int = 20_000) -> dict:
    """Compare Monte-Carlo moments of extended-Matheron draws with exact ones.

    Each entry of the mean and of the vec-covariance gets a z-score against
    its Monte-Carlo standard error; the report keeps the worst of each.
    """
    d_out, d_in, m_out, m_in = (int(v) for v in shape)
    rng = RngStream(seed, 17)
    prior = InducingPrior.random(d_out, d_in, m_out, m_in, rng.split(0))
    u = rng.split(1).normal((m_out, m_in))
    mean, cov = naive_conditional_moments(prior, u, lam)
    cache = build_cache(prior)
    n = d_out * d_in
    s1 = np.zeros(n)
    s2 = np.zeros((n, n))
    noise_rng = rng.split(2)
    left = draws
    while left > 0:
        k = min(chunk, left)
        w = matheron_extended(prior, u, lam, JointNoise.for_prior(prior, noise_rng, k), cache)
        v = np.swapaxes(w, -1, -2).reshape(k, n) - vec(mean)[:, 0]
        s1 += v.sum(axis=0)
        s2 += v.T @ v
        left -= k
    m_hat = s1 / draws
    c_hat = s2 / draws - np.outer(m_hat, m_hat)
    var = np.diag(cov)
    z_mean = np.abs(m_hat) / np.sqrt(var / draws)
    se_cov = np.sqrt((np.outer(var, var) + cov * cov) / draws)
    z_cov = np.abs(c_hat - cov) / se_cov
    return {
        "shape": [d_out, d_in, m_out, m_in], "lambda": lam, "draws": draws, "seed": seed,
        "max_z_mean": float(z_mean.max()), "max_z_cov": float(z_cov.max()),
        "max_abs_err_mean": float(np.abs(m_hat).max()), "max_abs_err_cov": float(np.abs(c_hat - cov).max()),
        "pass": bool(z_mean.max() <= 5.0 and z_cov.max() <= 5.0),
    }


def sampler_economy(sizes=(32, 64, 128, 256), M: int = 8, n: int = 200, repeats: int = 3, seed: int = 0) -> dict:
    """Speed-up of cached Matheron over naive sampling at 64x64, and runtime scaling.

    The exponent is the least-squares slope of log time-per-sample against
    log(d_out * d_in) over square layers of the given sizes, with ``M x M``
    inducing weights. Each timing keeps the fastest of ``repeats`` runs.
    """
    rng = RngStream(seed, 23)

    def best(prior, method, k):
        return min(benchmark(prior, method, k, rng.split(1000 * k + r))["ns_per_sample"] for r in range(repeats))

    prior64 = InducingPrior.random(64, 64, M, M, rng.split(0))
    ext64 = best(prior64, "extended", n)
    naive64 = best(prior64, "naive", n)
    per = []
    for i, d in enumerate(sizes):
        prior = InducingPrior.random(d, d, M, M, rng.split(i + 1))
        per.append(best(prior, "extended", n))
    slope = float(np.polyfit(np.log([d * d for d in sizes]), np.log(per), 1)[0])
    return {
        "M": M, "n": n, "speedup_64": naive64 / ext64, "ns_extended_64": ext64, "ns_naive_64": naive64,
        "sizes": list(sizes), "ns_per_sample": per, "exponent": slope,
    }
