"""Variational training: ELBO assembly, KL annealing, Adam and pruning.

The minibatch loss is the negative ELBO estimate

    loss = -(N/B) * sum_batch mean_K log p(y | x, W_k)
           + w_kl * sum_l (beta_l * R(lambda_l) + KL_l),

with ``beta_l = 1`` in weight-space mode and ``min(1, N / d_in_l)`` in
function-space mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import Network
from .linalg import RngStream


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised when the loss becomes non-finite; parameters are already restored."""

    def __init__(self, epoch: int, log: list):
        self.epoch = epoch
        self.log = log
        super().__init__(f"loss became non-finite in epoch {epoch}; restored last good parameters")


@dataclass
class ElboContext:
    N: int
    B: int
    w_kl: float = 1.0
    beta_mode: str = "weight"

    def __post_init__(self):
        if self.N < 1 or self.B < 1:
            raise ValueError("N and B must be positive")
        if not 0.0 <= self.w_kl <= 1.0:
            raise ValueError("w_kl must lie in [0, 1]")
        if self.beta_mode not in ("weight", "function"):
            raise ValueError("beta_mode must be 'weight' or 'function'")


def beta_weights(ctx: ElboContext, network: Network) -> list[float]:
    """Per-layer multipliers of R(lambda); all ones in weight-space mode."""
    if ctx.beta_mode == "weight":
        return [1.0] * len(network.layers)
    return [min(1.0, ctx.N / layer.shape.d_in_eff) for layer in network.layers]


@dataclass
class ElboTerms:
    loss: object
    nll: float
    kl: float


def elbo_batch(network: Network, X, Y, ctx: ElboContext, n_samples: int, rng: RngStream, pv=None) -> ElboTerms:
    """Negative ELBO on one minibatch; differentiable when ``pv`` holds tape variables."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("empty batch")
    b = X.shape[1]
    out = network.forward(X, n_samples, rng, pv)
    ll = network.likelihood.log_prob(out, Y)
    data = ad.mul(ad.sum(ll), ctx.N / (b * n_samples))
    nll = ad.neg(data)
    kl = 0.0
    for beta, (r, k) in zip(beta_weights(ctx, network), network.kl_terms(pv)):
        kl = ad.add(kl, ad.add(ad.mul(r, beta), k))
    loss = ad.add(nll, ad.mul(kl, ctx.w_kl)) if ctx.w_kl else nll
    return ElboTerms(loss, float(np.asarray(ad.value(nll))), float(np.asarray(ad.value(kl))))


@dataclass
class AnnealSchedule:
    warmup_epochs: int = 0
    ramp_epochs: int = 0
    total_epochs: int = 1

    def __post_init__(self):
        if min(self.warmup_epochs, self.ramp_epochs) < 0 or self.total_epochs < 1:
            raise ValueError("epoch counts must be non-negative")
        if self.warmup_epochs + self.ramp_epochs > self.total_epochs:
            raise ValueError("warmup + ramp must not exceed total epochs")

    def weight(self, epoch: int) -> float:
        """KL weight for a 0-based epoch."""
        if epoch < self.warmup_epochs:
            return 0.0
        if self.ramp_epochs == 0:
            return 1.0
        return min(1.0, (epoch - self.warmup_epochs + 1) / self.ramp_epochs)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise TrainingError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {np.shape(p)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int | None = None
    n_samples: int = 1
    seed: int = 0
    warmup_epochs: int = 0
    ramp_epochs: int = 0
    beta_mode: str = "weight"
    lr_decay_epoch: int | None = None
    log_every: int = 1

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.warmup_epochs, self.ramp_epochs, self.epochs)


def _gradients(network: Network, X, Y, ctx, n_samples, rng):
    tape = ad.Tape()
    pv = network.param_vars(tape)
    terms = elbo_batch(network, X, Y, ctx, n_samples, rng, pv)
    loss_val = float(np.asarray(ad.value(terms.loss)).reshape(()))
    if not np.isfinite(loss_val):
        return terms, loss_val, None
    g = tape.backward(terms.loss)
    grads = {}
    for name, var in pv.items():
        gi = g[var.id]
        mask = network.grad_mask(name)
        grads[name] = gi if mask is None else gi * mask
    return terms, loss_val, grads


def _apply_masks(network: Network, params: dict) -> dict:
    for name in params:
        i, key = name.split(".", 1)
        layer = network.layers[int(i)]
        if key in layer.masks:
            params[name] = params[name] * layer.masks[key]
        elif key == "mean" and "prune" in layer.masks:
            params[name] = params[name] * layer.masks["prune"]
    return params


def train(network: Network, X, Y, config: TrainConfig, log_path=None, adam: AdamState | None = None) -> list[dict]:
    """Optimise ``network`` in place; returns the per-epoch log records.

    ``X`` is ``(d_in, N)``; ``Y`` is ``(d_out, N)`` for regression or ``(N,)``
    integer labels. On a non-finite loss the parameters of the last completed
    epoch are restored and :class:`DivergenceError` is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    n = X.shape[1]
    b = n if config.batch_size is None else min(config.batch_size, n)
    sched = config.schedule()
    root = RngStream(config.seed)
    noise_rng = root.split(0)
    order_rng = root.split(1)
    adam = adam or AdamState(lr=config.lr)
    log: list[dict] = []
    good = {k: v.copy() for k, v in network.named_params().items()}
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            if config.lr_decay_epoch is not None and epoch == config.lr_decay_epoch:
                adam.lr *= 0.1
            ctx = ElboContext(N=n, B=b, w_kl=sched.weight(epoch), beta_mode=config.beta_mode)
            perm = order_rng.permutation(n) if b < n else np.arange(n)
            nll_sum = kl_sum = 0.0
            steps = 0
            for start in range(0, n - b + 1, b):
                idx = perm[start:start + b]
                yb = Y[..., idx]
                terms, loss_val, grads = _gradients(network, X[:, idx], yb, ctx, config.n_samples, noise_rng)
                if grads is None:
                    for k, v in good.items():
                        network.set_param(k, v.copy())
                    raise DivergenceError(epoch, log)
                new = _apply_masks(network, adam_step(adam, network.named_params(), grads))
                for k, v in new.items():
                    network.set_param(k, v)
                nll_sum += terms.nll
                kl_sum += terms.kl
                steps += 1
            good = {k: v.copy() for k, v in network.named_params().items()}
            if (epoch + 1) % config.log_every == 0 or epoch == config.epochs - 1:
                nll, kl = nll_sum / steps, kl_sum / steps
                rec = {
                    "epoch": epoch, "nll": nll, "kl": kl, "elbo": -(nll + kl), "w_kl": ctx.w_kl,
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
                log.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
    finally:
        if sink:
            sink.close()
    return log


def prune_z(network: Network, fraction: float) -> tuple[Network, dict]:
    """Zero the globally smallest-magnitude fraction of all Z entries and freeze them.

    Returns a pruned copy and the masks keyed by parameter name.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    net = network.copy()
    names = [
        (i, key) for i, layer in enumerate(net.layers) if layer.is_inducing for key in ("Z_r", "Z_c")
    ]
    if not names:
        raise ValueError("network has no inducing layers")
    mags = np.concatenate([np.abs(net.layers[i].params[k]).ravel() for i, k in names])
    alive = np.concatenate([net.layers[i].masks.get(k, np.ones_like(net.layers[i].params[k])).ravel() for i, k in names])
    n_prune = int(round(fraction * mags.size))
    drop = np.zeros(mags.size, dtype=bool)
    if n_prune:
        # already-pruned entries sort first so they stay pruned
        order = np.lexsort((mags, alive))
        drop[order[:n_prune]] = True
    masks = {}
    pos = 0
    for i, k in names:
        p = net.layers[i].params[k]
        keep = (~drop[pos:pos + p.size]).reshape(p.shape).astype(np.float64)
        keep *= net.layers[i].masks.get(k, 1.0)
        pos += p.size
        net.layers[i].masks[k] = keep
        net.layers[i].params[k] = p * keep
        masks[f"{i}.{k}"] = keep
    return net, masks


def prune_ffgw(network: Network, keep: float) -> tuple[Network, dict]:
    """Fix the FFG-W weights with the smallest |mean|/std to zero.

    ``keep`` is the fraction of weights (pooled over FFG-W layers) that stay
    stochastic. Pruned weights leave the variational family and the KL.
    """
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep must lie in (0, 1]")
    net = network.copy()
    idx = [i for i, layer in enumerate(net.layers) if layer.kind == "ffg_w"]
    if not idx:
        raise ValueError("network has no ffg_w layers")
    ratios = []
    for i in idx:
        layer = net.layers[i]
        r = np.abs(layer.params["mean"]) / ad.value(layer.ffg_w_std())
        prev = layer.masks.get("prune")
        if prev is not None:
            r = np.where(prev > 0, r, -np.inf)
        ratios.append(r.ravel())
    allr = np.concatenate(ratios)
    n_prune = allr.size - int(round(keep * allr.size))
    drop = np.zeros(allr.size, dtype=bool)
    if n_prune > 0:
        drop[np.argsort(allr, kind="stable")[:n_prune]] = True
    masks = {}
    pos = 0
    for i in idx:
        layer = net.layers[i]
        shape = layer.params["mean"].shape
        size = int(np.prod(shape))
        m = (~drop[pos:pos + size]).reshape(shape).astype(np.float64)
        pos += size
        layer.masks["prune"] = m
        layer.params["mean"] = layer.params["mean"] * m
        masks[f"{i}.prune"] = m
    return net, masks
