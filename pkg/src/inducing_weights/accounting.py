"""Exact parameter counts per layer for each inference method.

A manifest lists layers as ``(c_out, c_in, h, w, bias)``; each becomes a
``c_out x (c_in*h*w)`` weight matrix. Inducing methods store a bias as an
extra input column. Parameters in ``extra_deterministic`` (BatchNorm, say)
are added unchanged to every method's total.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

METHODS = ("deterministic", "ffg_w", "fcg_w", "ffg_u", "fcg_u", "ensemble_u")


class ManifestError(ValueError):
    pass


def load_manifest(source) -> dict:
    """Accept a dict, a path, or the name of a shipped manifest."""
    if isinstance(source, dict):
        doc = source
    else:
        src = str(source)
        if not src.endswith(".json"):
            src = Path(__file__).parent / "data" / f"{src}.json"
        with open(src, encoding="utf-8") as fh:
            doc = json.load(fh)
    layers = doc.get("layers")
    if not layers:
        raise ManifestError("manifest has no layers")
    for i, layer in enumerate(layers):
        for key in ("c_out", "c_in", "h", "w"):
            v = layer.get(key)
            if not isinstance(v, int) or v < 1:
                raise ManifestError(f"layer {i}: {key} must be a positive integer, got {v!r}")
    return doc


def layer_count(method: str, d_in: int, d_out: int, bias: bool, M_in: int = 0, M_out: int = 0, K: int = 5) -> int:
    """Exact trainable parameter count of one layer."""
    n_w = d_in * d_out + (d_out if bias else 0)
    if method == "deterministic":
        return n_w
    if method == "ffg_w":
        return 2 * n_w
    if method == "fcg_w":
        return n_w + n_w * (n_w + 1) // 2
    if method not in METHODS:
        raise ManifestError(f"unknown method {method!r}; expected one of {METHODS}")
    if M_in < 1 or M_out < 1:
        raise ManifestError("inducing methods need positive M_in and M_out")
    d_in_eff = d_in + int(bias)
    m = M_in * M_out
    shared = d_in_eff * M_in + d_out * M_out + M_in + M_out + 1  # Z, D, lambda
    if method == "ffg_u":
        return shared + 2 * m
    if method == "fcg_u":
        return shared + m + m * (m + 1) // 2
    if K < 1:
        raise ManifestError("K must be positive")
    return shared + K * m


@dataclass
class ParamBudget:
    method: str
    per_layer: list = field(default_factory=list)
    extra: int = 0
    total: int = 0
    deterministic_total: int = 0
    relative_size: float = 0.0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.per_layer and self.total != sum(r["count"] for r in self.per_layer) + self.extra:
            raise ManifestError("total does not equal the sum of per-layer counts")

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(manifest, method: str, M_in: int = 0, M_out: int = 0, K: int = 5,
                last_M_out: int | None = None, z_prune_fraction: float = 0.0) -> ParamBudget:
    """Per-layer and total counts for ``method`` on ``manifest``.

    ``last_M_out`` overrides ``M_out`` on the final layer. ``z_prune_fraction``
    removes that share of all Z entries from the count, as after pruning.
    """
    if method not in METHODS:
        raise ManifestError(f"unknown method {method!r}; expected one of {METHODS}")
    doc = load_manifest(manifest)
    layers = doc["layers"]
    extra = int(sum(doc.get("extra_deterministic", {}).values()))
    rows, det = [], 0
    n_z = 0
    for i, layer in enumerate(layers):
        d_in = layer["c_in"] * layer["h"] * layer["w"]
        d_out = layer["c_out"]
        bias = bool(layer.get("bias", False))
        mo = last_M_out if (last_M_out and i == len(layers) - 1) else M_out
        count = layer_count(method, d_in, d_out, bias, M_in, mo, K)
        det += layer_count("deterministic", d_in, d_out, bias)
        if method in ("ffg_u", "fcg_u", "ensemble_u"):
            n_z += (d_in + int(bias)) * M_in + d_out * mo
        rows.append({"name": layer.get("name", f"layer{i}"), "d_in": d_in, "d_out": d_out,
                     "bias": bias, "M_in": M_in, "M_out": mo, "count": count})
    notes = list(doc.get("assumptions", []))
    if extra:
        notes.append(f"{extra} deterministic-side parameters ({', '.join(doc['extra_deterministic'])}) "
                     "are included in every total")
    if z_prune_fraction:
        if not 0.0 <= z_prune_fraction < 1.0 or not n_z:
            raise ManifestError("z_prune_fraction needs an inducing method and a value in [0, 1)")
        pruned = int(round(z_prune_fraction * n_z))
        rows.append({"name": "pruned Z entries", "d_in": 0, "d_out": 0, "bias": False,
                     "M_in": 0, "M_out": 0, "count": -pruned})
        notes.append(f"{pruned} of {n_z} Z entries pruned to zero and not counted")
    total = sum(r["count"] for r in rows) + extra
    det_total = det + extra
    return ParamBudget(method, rows, extra, total, det_total, total / det_total, notes)
