"""Synthetic datasets and a small CSV format.

Datasets are returned with features as rows: ``X`` has shape ``(d, N)``.
Regression targets are ``(1, N)``; class labels are an integer vector ``(N,)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import RngStream


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    task: str  # "regression" or "classification"

    @property
    def n(self) -> int:
        return self.X.shape[1]


def toy_target(x, variant: str = "main"):
    """Noise-free toy regression target; ``variant='alt'`` uses cos(0.4x + 0.8)."""
    freq = {"main": 4.0, "alt": 0.4}[variant]
    return np.cos(freq * np.asarray(x) + 0.8)


def gen_toy_regression(seed: int, n_per_cluster: int = 50, noise_var: float = 0.01, variant: str = "main") -> Dataset:
    """Two clusters on [-1, -0.7] and [0.5, 1] with Gaussian target noise."""
    rng = RngStream(seed, 101)
    x = np.concatenate([rng.uniform(-1.0, -0.7, n_per_cluster), rng.uniform(0.5, 1.0, n_per_cluster)])
    y = toy_target(x, variant) + np.sqrt(noise_var) * rng.normal(x.shape)
    return Dataset(x[None, :], y[None, :], "regression")


def gen_two_moons(n: int, noise_std: float, seed: int) -> Dataset:
    """Two interleaving unit half-circles; class sizes differ by at most one."""
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = RngStream(seed, 202)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)])
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.concatenate([upper, lower], axis=1)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise_std > 0:
        X = X + noise_std * rng.normal(X.shape)
    perm = rng.permutation(n)
    return Dataset(X[:, perm], y[perm], "classification")


MOONS_BOX = np.array([[-1.0, 2.0], [-0.5, 1.0]])  # noise-free data range per feature


def gen_ood_uniform(n: int, box=None, seed: int = 0, scale: float = 2.0) -> np.ndarray:
    """Uniform points on ``box`` (rows are [low, high]) enlarged ``scale``-fold about its centre."""
    box = MOONS_BOX if box is None else np.asarray(box, dtype=np.float64)
    centre = box.mean(axis=1, keepdims=True)
    half = 0.5 * scale * (box[:, 1:] - box[:, :1])
    rng = RngStream(seed, 303)
    u = rng.uniform(-1.0, 1.0, (box.shape[0], n))
    return centre + half * u


def moons_tube_distance(X) -> np.ndarray:
    """Distance of each column of ``X`` to the noise-free two-moons curves."""
    X = np.asarray(X, dtype=np.float64)

    def arc(p, cx, cy, upper):
        dx, dy = p[0] - cx, p[1] - cy
        ang = np.arctan2(dy, dx)
        on_arc = (ang >= 0) if upper else (ang <= 0)
        radial = np.abs(np.hypot(dx, dy) - 1.0)
        ends = np.array([[cx + 1.0, cx - 1.0], [cy, cy]])
        end_d = np.min(np.hypot(p[0][:, None] - ends[0], p[1][:, None] - ends[1]), axis=1)
        return np.where(on_arc, radial, end_d)

    return np.minimum(arc(X, 0.0, 0.0, True), arc(X, 1.0, 0.5, False))


def save_csv(path, X, Y, feature_names=None, target_names=None) -> None:
    X = np.asarray(X)
    Y = np.asarray(Y)
    Y2 = Y[None, :] if Y.ndim == 1 else Y
    fnames = feature_names or [f"x{i}" for i in range(X.shape[0])]
    tnames = target_names or (["y"] if Y2.shape[0] == 1 else [f"y{i}" for i in range(Y2.shape[0])])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fnames + tnames)
        for j in range(X.shape[1]):
            w.writerow([repr(float(v)) for v in X[:, j]] + [_fmt(v) for v in Y2[:, j]])


def _fmt(v):
    if float(v).is_integer() and np.issubdtype(np.asarray(v).dtype, np.integer):
        return str(int(v))
    return repr(float(v))


def load_csv(path, n_targets: int = 1) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a CSV with a header; the last ``n_targets`` columns are targets."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path} has no data rows")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    X = data[:, :-n_targets].T.copy()
    Y = data[:, -n_targets:].T.copy()
    return X, Y, header
