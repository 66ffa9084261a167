"""Bayesian dense layers and small networks.

Inputs are laid out with features as rows, ``X`` of shape ``(d_in, N)``;
layer outputs carry a leading Monte Carlo axis, ``(K, d_out, N)``. A bias is
handled by appending a row of ones to the input, so a layer with bias owns a
``d_out x (d_in + 1)`` weight matrix and the bias shares the weight posterior.

Every variant stores unconstrained arrays in ``layer.params``. The training
code lifts them onto a tape with :meth:`Network.param_vars`, while evaluation
code passes the arrays straight through; both run the same functions.

Variants
--------
``deterministic``  point-estimate weights.
``ffg_w``          factorised Gaussian over W.
``fcg_w``          full-covariance Gaussian over vec(W) (small layers only).
``ffg_u``          inducing weights, factorised Gaussian over whitened U.
``fcg_u``          inducing weights, full-covariance Gaussian over whitened U.
``ensemble_u``     inducing weights, K point masses for U.
"""

from __future__ import annotations

import base64
import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .linalg import RngStream, ShapeError
from .matrix_normal import (
    InducingPrior,
    conditional_kl_R,
    kl_diag_normal,
    kl_full_normal_iso,
    psi,
    psi_from,
    whiten_with,
)
from .sampler import JointNoise, build_parts, matheron_whitened

VARIANTS = ("deterministic", "ffg_w", "fcg_w", "ffg_u", "fcg_u", "ensemble_u")
INDUCING = ("ffg_u", "fcg_u", "ensemble_u")
FULL_COV_CAP = 512
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "identity": ad.identity}
CHECKPOINT_FORMAT = "inducing-weights-checkpoint/1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    d_in: int
    d_out: int
    bias: bool = True
    conv_meta: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ShapeError("layer dimensions must be positive")
        if self.conv_meta is not None:
            c_out, c_in, h, w = self.conv_meta
            if self.d_out != c_out or self.d_in != c_in * h * w:
                raise ShapeError("conv metadata does not match d_out x d_in")

    @property
    def d_in_eff(self) -> int:
        """Input width including the bias column."""
        return self.d_in + int(self.bias)


def reshape_conv(meta, bias: bool = False) -> LayerShape:
    """View a ``(c_out, c_in, h, w)`` kernel as a ``c_out x c_in*h*w`` matrix."""
    c_out, c_in, h, w = (int(v) for v in meta)
    if min(c_out, c_in, h, w) < 1:
        raise ShapeError(f"conv dimensions must be positive, got {tuple(meta)}")
    return LayerShape(d_in=c_in * h * w, d_out=c_out, bias=bias, conv_meta=(c_out, c_in, h, w))


@dataclass
class VariantConfig:
    """Per-layer inference settings.

    ``prior_std`` is the std of the Gaussian prior on each weight. ``sigma_max``
    caps FFG standard deviations (for ``ffg_u`` it caps sqrt(v_u)); ``None`` means
    uncapped. ``lambda_max = 0`` pins lambda to zero and drops its KL term.
    """

    kind: str = "ffg_u"
    prior_std: float = 1.0
    M_in: int | None = None
    M_out: int | None = None
    K: int = 5
    sigma_max: float | None = None
    lambda_max: float | None = 1.0
    lambda_init: float = 1e-4
    init_var_u: float = 1e-3
    init_std_w: float = 1e-4
    d_init: float = 1e-3
    ensemble_noise: float = 0.1

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")
        if self.kind in INDUCING:
            if not self.M_in or not self.M_out or self.M_in < 1 or self.M_out < 1:
                raise ConfigError("inducing variants need positive M_in and M_out")
            if self.lambda_max is not None and self.lambda_max < 0:
                raise ConfigError("lambda_max must be non-negative")
            if self.lambda_max and not 0 < self.lambda_init < self.lambda_max:
                raise ConfigError("lambda_init must lie strictly inside (0, lambda_max)")
        if self.kind == "ensemble_u" and self.K < 2:
            raise ConfigError("ensembles need K >= 2")
        if self.sigma_max is not None and self.sigma_max <= 0:
            raise ConfigError("sigma_max must be positive")


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _capped(raw, cap):
    """``cap * sigmoid(raw)`` when a cap is set, otherwise ``softplus(raw)``."""
    if cap is None:
        return ad.softplus(raw)
    return ad.mul(ad.sigmoid(raw), float(cap))


def _uncap(value, cap):
    if cap is None:
        return _inv_softplus(value)
    if not 0 < value < cap:
        raise ConfigError(f"initial value {value} must lie inside (0, {cap})")
    return _logit(value / cap)


@functools.lru_cache(maxsize=16)
def _strict_lower(n: int) -> np.ndarray:
    m = np.tril(np.ones((n, n)), -1)
    m.setflags(write=False)
    return m


def _full_chol(raw):
    """Lower factor with softplus diagonal from an unconstrained square array."""
    n = np.shape(ad.value(raw))[0]
    strict = _strict_lower(n)
    return ad.add(ad.mul(raw, strict), ad.mul(ad.softplus(raw), np.eye(n)))


def _unvec_batch(v, rows, cols):
    # (K, rows*cols, 1) column-stacked -> (K, rows, cols)
    k = np.shape(ad.value(v))[0]
    return ad.mT(ad.reshape(v, (k, cols, rows)))


class BayesLayer:
    def __init__(self, shape: LayerShape, config: VariantConfig, params: dict, masks: dict | None = None):
        self.shape = shape
        self.config = config
        self.params = params
        self.masks = masks or {}

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def is_inducing(self) -> bool:
        return self.kind in INDUCING

    def __repr__(self):
        return f"BayesLayer({self.kind}, {self.shape.d_out}x{self.shape.d_in_eff})"

    # ---------------------------------------------------------------- pieces

    def lam(self, p=None):
        p = self.params if p is None else p
        cap = self.config.lambda_max
        if cap == 0:
            return 0.0
        return _capped(p["lam_raw"], cap)

    def sigma(self) -> float:
        return self.config.prior_std

    def prior(self, p=None) -> InducingPrior:
        """Current prior parameters as plain arrays (for oracles and caches)."""
        p = self.params if p is None else p
        c = self.config
        return InducingPrior(
            d_in=self.shape.d_in_eff, d_out=self.shape.d_out, M_in=c.M_in, M_out=c.M_out,
            sigma_r=1.0, sigma_c=c.prior_std,
            Z_r=ad.value(p["Z_r"]), Z_c=ad.value(p["Z_c"]),
            D_r=ad.value(ad.softplus(p["D_r_raw"])), D_c=ad.value(ad.softplus(p["D_c_raw"])),
        )

    def ffg_u_var(self, p=None):
        p = self.params if p is None else p
        cap = None if self.config.sigma_max is None else self.config.sigma_max ** 2
        return _capped(p["u_var_raw"], cap)

    def ffg_w_std(self, p=None):
        p = self.params if p is None else p
        return _capped(p["std_raw"], self.config.sigma_max)

    # ---------------------------------------------------------------- sampling

    def sample_u_white(self, p, n: int, rng: RngStream, offset: int | None = None):
        """Whitened inducing draws ``(n, M_out, M_in)`` and ensemble indices (or None)."""
        c = self.config
        if self.kind == "ffg_u":
            eps = rng.normal((n, c.M_out, c.M_in))
            return ad.add(p["u_mean"], ad.mul(ad.sqrt(self.ffg_u_var(p)), eps)), None
        if self.kind == "fcg_u":
            m = c.M_out * c.M_in
            eps = rng.normal((n, m, 1))
            v = ad.add(p["u_mean"], ad.matmul(_full_chol(p["u_chol_raw"]), eps))
            return _unvec_batch(v, c.M_out, c.M_in), None
        if self.kind == "ensemble_u":
            if offset is None:
                offset = int(rng.integers(0, c.K))
            idx = (offset + np.arange(n)) % c.K
            return ad.take(p["u_members"], idx, axis=0), idx
        raise ConfigError(f"{self.kind} layers have no inducing weights")

    def sample_weights(self, p, n: int, rng: RngStream):
        """``n`` weight samples of shape ``(n, d_out, d_in_eff)``."""
        d_out, d_in = self.shape.d_out, self.shape.d_in_eff
        kind = self.kind
        if kind == "deterministic":
            return p["W"]
        if kind == "ffg_w":
            eps = rng.normal((n, d_out, d_in))
            w = ad.add(p["mean"], ad.mul(self.ffg_w_std(p), eps))
            if "prune" in self.masks:
                w = ad.mul(w, self.masks["prune"])
            return w
        if kind == "fcg_w":
            eps = rng.normal((n, d_out * d_in, 1))
            v = ad.add(p["mean"], ad.matmul(_full_chol(p["chol_raw"]), eps))
            return _unvec_batch(v, d_out, d_in)
        # inducing variants
        c = self.config
        d_r = ad.softplus(p["D_r_raw"])
        d_c = ad.softplus(p["D_c_raw"])
        psi_r = psi_from(p["Z_r"], d_r)
        psi_c = psi_from(p["Z_c"], d_c)
        parts = build_parts(c.prior_std, p["Z_r"], p["Z_c"], d_r, d_c, psi_r, psi_c)
        u_white, _ = self.sample_u_white(p, n, rng)
        lam = self.lam(p)
        noise = None if c.lambda_max == 0 else JointNoise.draw(rng, d_out, d_in, c.M_out, c.M_in, n)
        return matheron_whitened(parts, u_white, lam, noise)

    # ---------------------------------------------------------------- KL

    def kl_terms(self, p=None):
        """``(R(lambda), KL over U or W)``; either may be the float 0."""
        p = self.params if p is None else p
        kind = self.kind
        prior_var = self.config.prior_std ** 2
        if kind == "deterministic":
            return 0.0, 0.0
        if kind == "ffg_w":
            std = self.ffg_w_std(p)
            if "prune" in self.masks:
                keep = self.masks["prune"]
                # pruned weights are point masses at zero and leave the family
                mean = ad.mul(p["mean"], keep)
                var = ad.add(ad.mul(ad.square(std), keep), prior_var * (1.0 - keep))
                return 0.0, kl_diag_normal(mean, var, prior_var)
            return 0.0, kl_diag_normal(p["mean"], ad.square(std), prior_var)
        if kind == "fcg_w":
            return 0.0, kl_full_normal_iso(p["mean"], _full_chol(p["chol_raw"]), prior_var)
        r = 0.0
        if self.config.lambda_max != 0:
            r = conditional_kl_R(self.lam(p), self.shape.d_in_eff, self.shape.d_out)
        if kind == "ffg_u":
            return r, kl_diag_normal(p["u_mean"], self.ffg_u_var(p), 1.0)
        if kind == "fcg_u":
            return r, kl_full_normal_iso(p["u_mean"], _full_chol(p["u_chol_raw"]), 1.0)
        return r, 0.0

    def kl(self, p=None):
        r, k = self.kl_terms(p)
        return ad.add(r, k)

    # ---------------------------------------------------------------- bookkeeping

    def n_params(self) -> int:
        """Free parameters; masked (pruned) entries are not counted."""
        total = sum(int(np.size(v)) for v in self.params.values())
        if self.kind == "fcg_w":
            n = self.params["chol_raw"].shape[0]
            total -= n * (n - 1) // 2
        if self.kind == "fcg_u":
            n = self.params["u_chol_raw"].shape[0]
            total -= n * (n - 1) // 2
        for name, mask in self.masks.items():
            zeros = int(np.size(mask) - np.count_nonzero(mask))
            total -= zeros * (2 if name == "prune" else 1)
        return total

    def grad_mask(self, name: str):
        if name in self.masks:
            return self.masks[name]
        if name in ("mean", "std_raw") and "prune" in self.masks:
            return self.masks["prune"]
        return None


def init_layer(shape: LayerShape, config: VariantConfig, rng: RngStream) -> BayesLayer:
    """Initialise a layer's unconstrained parameters."""
    d_out, d_in = shape.d_out, shape.d_in_eff
    kind = config.kind
    bound = 1.0 / np.sqrt(shape.d_in)
    p: dict[str, np.ndarray] = {}
    if kind == "deterministic":
        p["W"] = rng.uniform(-bound, bound, (d_out, d_in))
    elif kind == "ffg_w":
        p["mean"] = rng.uniform(-bound, bound, (d_out, d_in))
        p["std_raw"] = np.full((d_out, d_in), _uncap(config.init_std_w, config.sigma_max))
    elif kind == "fcg_w":
        n = d_out * d_in
        if n > FULL_COV_CAP:
            raise ConfigError(f"fcg_w needs d_out*d_in <= {FULL_COV_CAP}, got {n}")
        p["mean"] = linalg.vec(rng.uniform(-bound, bound, (d_out, d_in)))
        p["chol_raw"] = np.diag(np.full(n, _inv_softplus(config.init_std_w)))
    else:
        m_in, m_out = config.M_in, config.M_out
        p["Z_r"] = rng.normal((m_out, d_out)) / np.sqrt(m_out)
        p["Z_c"] = rng.normal((m_in, d_in)) / np.sqrt(m_in)
        p["D_r_raw"] = np.full(m_out, _inv_softplus(config.d_init))
        p["D_c_raw"] = np.full(m_in, _inv_softplus(config.d_init))
        lam_init = config.lambda_init if config.lambda_max != 0 else 0.5
        p["lam_raw"] = np.array(_uncap(lam_init, config.lambda_max or None), dtype=np.float64)
        if kind == "ffg_u":
            cap = None if config.sigma_max is None else config.sigma_max ** 2
            p["u_mean"] = rng.normal((m_out, m_in))
            p["u_var_raw"] = np.full((m_out, m_in), _uncap(config.init_var_u, cap))
        elif kind == "fcg_u":
            n = m_out * m_in
            if n > FULL_COV_CAP:
                raise ConfigError(f"fcg_u needs M_out*M_in <= {FULL_COV_CAP}, got {n}")
            p["u_mean"] = rng.normal((n, 1))
            p["u_chol_raw"] = np.diag(np.full(n, _inv_softplus(np.sqrt(config.init_var_u))))
        else:
            shared = rng.normal((1, m_out, m_in))
            p["u_members"] = shared + config.ensemble_noise * rng.normal((config.K, m_out, m_in))
    return BayesLayer(shape, config, p)


def sample_u(layer: BayesLayer, rng: RngStream, n: int = 1, offset: int | None = None):
    """Draw ``U`` (un-whitened) from ``q(U)``.

    Returns ``(U, member_indices)`` with ``U`` of shape ``(n, M_out, M_in)``;
    indices are None for Gaussian posteriors.
    """
    u_white, idx = layer.sample_u_white(layer.params, n, rng, offset)
    psi_r, psi_c = psi(layer.prior())
    return whiten_with(linalg.cholesky(psi_r), linalg.cholesky(psi_c), u_white), idx


def layer_kl(layer: BayesLayer) -> float:
    return float(np.asarray(ad.value(layer.kl())).reshape(()))


@dataclass
class Likelihood:
    kind: str = "gaussian"
    noise_var: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ConfigError(f"unknown likelihood {self.kind!r}")
        if self.kind == "gaussian" and self.noise_var <= 0:
            raise ConfigError("noise_var must be positive")

    def log_prob(self, out, y):
        """Per-sample, per-example log-likelihood with shape ``(K, 1, N)``."""
        if self.kind == "gaussian":
            return ad.sum(ad.gaussian_logpdf(np.asarray(y, dtype=np.float64), out, self.noise_var), axis=-2, keepdims=True)
        return ad.neg(ad.softmax_cross_entropy(out, y))


class Network:
    def __init__(self, layers: list[BayesLayer], activations: list[str], likelihood: Likelihood):
        if len(activations) != len(layers):
            raise ConfigError("one activation per layer is required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape.d_out != nxt.shape.d_in:
                raise ShapeError(f"layer widths do not compose: {prev.shape.d_out} -> {nxt.shape.d_in}")
        self.layers = layers
        self.activations = list(activations)
        self.likelihood = likelihood

    def __repr__(self):
        return f"Network({self.layers}, {self.activations}, {self.likelihood.kind})"

    @classmethod
    def mlp(cls, widths, configs, activations, likelihood: Likelihood, rng: RngStream, bias: bool = True):
        if len(configs) != len(widths) - 1:
            raise ConfigError("one variant config per layer is required")
        layers = [
            init_layer(LayerShape(d_in, d_out, bias), cfg, rng.split(i))
            for i, (d_in, d_out, cfg) in enumerate(zip(widths[:-1], widths[1:], configs))
        ]
        return cls(layers, activations, likelihood)

    # ---------------------------------------------------------------- params

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def param_vars(self, tape: ad.Tape) -> dict[str, ad.Var]:
        return {name: tape.leaf(v) for name, v in self.named_params().items()}

    def layer_view(self, pv: dict | None, i: int) -> dict:
        if pv is None:
            return self.layers[i].params
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in pv.items() if k.startswith(prefix)}

    def set_param(self, name: str, value: np.ndarray) -> None:
        i, key = name.split(".", 1)
        self.layers[int(i)].params[key] = value

    def grad_mask(self, name: str):
        i, key = name.split(".", 1)
        return self.layers[int(i)].grad_mask(key)

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    # ---------------------------------------------------------------- compute

    def forward(self, X, n_samples: int, rng: RngStream, pv: dict | None = None):
        """Outputs ``(K, d_out, N)`` for ``K = n_samples`` weight draws per layer."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != self.layers[0].shape.d_in:
            raise ShapeError(f"expected inputs of shape ({self.layers[0].shape.d_in}, N), got {X.shape}")
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        n = X.shape[1]
        h = X
        for i, (layer, act) in enumerate(zip(self.layers, self.activations)):
            w = layer.sample_weights(self.layer_view(pv, i), n_samples, rng)
            if not layer.shape.bias:
                h = ad.matmul(w, h)
            elif isinstance(h, np.ndarray):
                # constant input: append a ones row so the bias rides in one matmul
                h = ad.matmul(w, np.concatenate([h, np.ones(h.shape[:-2] + (1, h.shape[-1]))], axis=-2))
            else:
                h = ad.affine(w, h)
            h = ACTIVATIONS[act](h)
        v = ad.value(h)
        if np.ndim(v) == 2:
            h = ad.broadcast_to(h, (n_samples,) + v.shape)
        return h

    def kl_terms(self, pv: dict | None = None):
        return [layer.kl_terms(self.layer_view(pv, i)) for i, layer in enumerate(self.layers)]

    def kl(self, pv: dict | None = None):
        total = 0.0
        for r, k in self.kl_terms(pv):
            total = ad.add(ad.add(total, r), k)
        return total

    # ---------------------------------------------------------------- checkpoints

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "activations": self.activations,
            "likelihood": asdict(self.likelihood),
            "layers": [
                {
                    "layer_index": i,
                    "variant": layer.kind,
                    "shape": {
                        "d_in": layer.shape.d_in, "d_out": layer.shape.d_out, "bias": layer.shape.bias,
                        "conv_meta": list(layer.shape.conv_meta) if layer.shape.conv_meta else None,
                    },
                    "config": asdict(layer.config),
                    "arrays": {k: encode_array(v) for k, v in layer.params.items()},
                    "masks": {k: encode_array(v) for k, v in layer.masks.items()},
                }
                for i, layer in enumerate(self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unrecognised checkpoint format {d.get('format')!r}")
        layers = []
        for entry in sorted(d["layers"], key=lambda e: e["layer_index"]):
            s = entry["shape"]
            meta = tuple(s["conv_meta"]) if s.get("conv_meta") else None
            shape = LayerShape(s["d_in"], s["d_out"], s["bias"], meta)
            config = VariantConfig(**entry["config"])
            params = {k: decode_array(v) for k, v in entry["arrays"].items()}
            masks = {k: decode_array(v) for k, v in entry.get("masks", {}).items()}
            layers.append(BayesLayer(shape, config, params, masks))
        return cls(layers, d["activations"], Likelihood(**d["likelihood"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def copy(self) -> "Network":
        return Network.from_dict(self.to_dict())


def encode_array(a) -> dict:
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(d["shape"])).astype(np.float64)
