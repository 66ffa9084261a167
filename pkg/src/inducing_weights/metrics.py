"""Predictive evaluation, calibration and out-of-distribution metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from . import autodiff as ad
from .layers import Network
from .linalg import RngStream


class MetricsError(ValueError):
    pass


def _forward_values(network: Network, X, K: int, rng: RngStream, chunk: int = 32) -> np.ndarray:
    """Network outputs ``(K, d_out, N)`` computed in sample chunks."""
    parts = []
    left = K
    while left > 0:
        k = min(chunk, left)
        parts.append(np.asarray(ad.value(network.forward(X, k, rng))))
        left -= k
    return np.concatenate(parts, axis=0)


def predict(network: Network, X, K: int, rng: RngStream):
    """Monte-Carlo predictive distribution.

    Classification returns averaged softmax probabilities with shape ``(N, C)``.
    Regression returns ``(mean, std)``, each ``(d_out, N)``, for the Gaussian
    mixture over weight samples, likelihood noise included.
    """
    if K < 1:
        raise MetricsError("K must be at least 1")
    out = _forward_values(network, X, K, rng)
    if network.likelihood.kind == "categorical":
        return softmax(out, axis=1).mean(axis=0).T
    mean = out.mean(axis=0)
    var = np.maximum((out * out).mean(axis=0) - mean * mean, 0.0) + network.likelihood.noise_var
    return mean, np.sqrt(var)


def _check_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise MetricsError("probabilities must be a non-empty (N, C) array")
    if labels.shape[0] != probs.shape[0]:
        raise MetricsError("one label per row is required")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise MetricsError("probability rows must sum to 1")
    return probs, labels


def accuracy(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    return float(np.mean(probs.argmax(axis=1) == labels))


def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins of the max probability.

    Bins are right-closed, so a confidence of exactly 0.9 falls in (0.8, 0.9].
    """
    probs, labels = _check_probs(probs, labels)
    if n_bins < 1:
        raise MetricsError("n_bins must be positive")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    gap = np.abs(np.bincount(idx, correct, n_bins) - np.bincount(idx, conf, n_bins))
    return float(gap.sum() / conf.size) if count.any() else 0.0


def brier(probs, labels) -> float:
    """Mean over examples of ``(1/C) * sum_c (p_c - y_c)^2``."""
    probs, labels = _check_probs(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean((probs - onehot) ** 2))


def nll(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(np.float64).tiny))))


def auroc_aupr(scores_in, scores_out) -> tuple[float, float]:
    """AUROC and AUPR with in-distribution points as positives.

    AUROC is the Mann-Whitney statistic with tied ranks averaged. AUPR
    integrates precision over recall with the trapezoid rule, one point per
    distinct threshold, starting from (recall 0, precision 1).
    """
    s_in = np.asarray(scores_in, dtype=np.float64).reshape(-1)
    s_out = np.asarray(scores_out, dtype=np.float64).reshape(-1)
    if s_in.size == 0 or s_out.size == 0:
        raise MetricsError("both score sets must be non-empty")
    n_in, n_out = s_in.size, s_out.size
    ranks = rankdata(np.concatenate([s_in, s_out]))
    auroc = (ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0) / (n_in * n_out)

    scores = np.concatenate([s_in, s_out])
    pos = np.concatenate([np.ones(n_in), np.zeros(n_out)])
    order = np.argsort(-scores, kind="stable")
    scores, pos = scores[order], pos[order]
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    recall = np.r_[0.0, tp / n_in]
    precision = np.r_[1.0, tp / (tp + fp)]
    aupr = float(np.sum(np.diff(recall) * 0.5 * (precision[1:] + precision[:-1])))
    return float(auroc), aupr


@dataclass
class MetricsReport:
    accuracy: float
    nll: float
    brier: float
    ece: float
    auroc: float | None = None
    aupr: float | None = None

    def __post_init__(self):
        for name in ("accuracy", "brier", "ece", "auroc", "aupr"):
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1 + 1e-12:
                raise MetricsError(f"{name}={v} lies outside [0, 1]")
        if self.nll < 0:
            raise MetricsError("nll must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def classification_report(probs, labels, probs_ood=None, n_bins: int = 10) -> MetricsReport:
    au = (None, None)
    if probs_ood is not None:
        au = auroc_aupr(np.asarray(probs).max(axis=1), np.asarray(probs_ood).max(axis=1))
    return MetricsReport(
        accuracy=accuracy(probs, labels), nll=nll(probs, labels), brier=brier(probs, labels),
        ece=ece(probs, labels, n_bins), auroc=au[0], aupr=au[1],
    )


def regression_report(mean, std, y) -> dict:
    """Gaussian predictive NLL and RMSE for targets ``y`` shaped like ``mean``."""
    mean, std = np.asarray(mean), np.asarray(std)
    y = np.asarray(y, dtype=np.float64).reshape(mean.shape)
    z = (y - mean) / std
    nll_val = float(np.mean(0.5 * z * z + np.log(std) + 0.5 * np.log(2 * np.pi)))
    return {"nll": nll_val, "rmse": float(np.sqrt(np.mean((y - mean) ** 2)))}
