"""Define-by-run reverse-mode differentiation over float64 arrays.

Every op in this module accepts either :class:`Var` objects or plain arrays.
When no argument is a ``Var`` the op simply returns the NumPy result, so the
same model code runs with or without a tape. Plain arrays (and Python floats)
are treated as constants; in particular reparameterisation noise is always
passed in as a constant.

Binary elementwise ops follow NumPy broadcasting, and ``matmul`` broadcasts
over leading batch axes, which is how Monte Carlo samples are batched.
"""

from __future__ import annotations

import functools
from typing import Callable

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit

from . import linalg
from .linalg import ShapeError

_LOG_2PI = float(np.log(2.0 * np.pi))


class UnsupportedOpError(RuntimeError):
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"no reverse-mode rule for op {tag!r}")


class EvaluationError(RuntimeError):
    pass


class Node:
    __slots__ = ("tag", "parents", "value", "aux")

    def __init__(self, tag, parents, value, aux):
        self.tag = tag
        self.parents = parents
        self.value = value
        self.aux = aux


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return mT(self)

    def __repr__(self):
        return f"Var(id={self.id}, tag={self.tape.nodes[self.id].tag!r}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), value, None))
        return Var(self, len(self.nodes) - 1, value)

    def record(self, tag: str, parents, value, aux=None) -> Var:
        """Append a node. ``parents`` may mix Vars and constant arrays."""
        for p in parents:
            if isinstance(p, Var) and p.tape is not self:
                raise ValueError("all parents must live on the same tape")
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(tag, tuple(parents), value, aux))
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf on the tape.

        Leaves that do not influence the loss get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        nodes = self.nodes
        grads: list = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        out: dict[int, np.ndarray] = {}
        for i in range(loss.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.tag == "leaf":
                out[i] = g
                continue
            rule = _RULES.get(node.tag)
            if rule is None:
                raise UnsupportedOpError(node.tag)
            pgrads = rule(g, node)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Var):
                    continue
                cur = grads[p.id]
                grads[p.id] = pg if cur is None else cur + pg
        for i, node in enumerate(nodes):
            if node.tag == "leaf" and i not in out:
                out[i] = np.zeros_like(node.value)
        return out


# ---------------------------------------------------------------- helpers

def _isv(x) -> bool:
    return isinstance(x, Var)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _shape(x):
    return np.shape(value(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- binary ops

def _binary(tag, fn):
    def op(a, b):
        av = a.value if isinstance(a, Var) else a
        bv = b.value if isinstance(b, Var) else b
        try:
            out = fn(av, bv)
        except ValueError:
            raise ShapeError(f"{tag}: shapes {np.shape(av)} and {np.shape(bv)} do not broadcast") from None
        t = _tape(a, b)
        if t is None:
            return out
        return t.record(tag, (a, b), out)

    op.__name__ = tag
    return op


add = _binary("add", np.add)
sub = _binary("sub", np.subtract)
mul = _binary("mul", np.multiply)
mul.__doc__ = "Elementwise (Hadamard) product with broadcasting."
div = _binary("div", np.divide)


def scale(a, c: float):
    return mul(a, float(c))


def neg(a):
    if not _isv(a):
        return -a
    return a.tape.record("neg", (a,), -a.value)


def matmul(a, b, ta: bool = False, tb: bool = False):
    """Matrix product over the trailing two axes, broadcasting leading axes.

    ``ta``/``tb`` transpose the trailing axes of an operand first.
    """
    av, bv = value(a), value(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ShapeError(f"matmul: cannot multiply {np.shape(av)} by {np.shape(bv)}")
    if ta:
        av = _swap(av)
    if tb:
        bv = _swap(bv)
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    t = _tape(a, b)
    if t is None:
        return av @ bv
    return t.record("matmul", (a, b), av @ bv, (ta, tb))


def matmul3(a, b, c, ta: bool = False, tc: bool = False):
    """``op(a) @ b @ op(c)`` recorded as a single node."""
    av, bv, cv = value(a), value(b), value(c)
    if ta:
        av = _swap(av)
    if tc:
        cv = _swap(cv)
    if av.shape[-1] != bv.shape[-2] or bv.shape[-1] != cv.shape[-2]:
        raise ShapeError(f"matmul3: shapes {av.shape}, {bv.shape}, {cv.shape} do not chain")
    ab = av @ bv
    out = ab @ cv
    t = _tape(a, b, c)
    if t is None:
        return out
    return t.record("matmul3", (a, b, c), out, (ta, tc, ab))


def affine(w, h):
    """``w[..., :-1] @ h + w[..., -1:]``: a dense layer whose last weight column is the bias."""
    wv, hv = value(w), value(h)
    if wv.shape[-1] != hv.shape[-2] + 1:
        raise ShapeError(f"affine: weights {wv.shape} do not fit inputs {hv.shape} plus a bias column")
    out = wv[..., :-1] @ hv
    out += wv[..., -1:]
    t = _tape(w, h)
    if t is None:
        return out
    return t.record("affine", (w, h), out)


def diag_scale(d_row, x, d_col):
    """``diag(d_row) @ x @ diag(d_col)`` for 1-D diagonals; either may be None."""
    xv = value(x)
    out = xv
    if d_row is not None:
        out = value(d_row)[:, None] * out
    if d_col is not None:
        out = out * value(d_col)
    t = _tape(d_row, x, d_col)
    if t is None:
        return out
    return t.record("diag_scale", (d_row, x, d_col), out)


def gram_diag(z, d):
    """``z z^T + diag(d)^2`` with ``d`` a 1-D array."""
    zv, dv = value(z), value(d)
    if dv.shape != (zv.shape[0],):
        raise ShapeError(f"gram_diag: diagonal of length {zv.shape[0]} expected, got {dv.shape}")
    out = zv @ zv.T
    out.reshape(-1)[:: out.shape[0] + 1] += dv * dv
    t = _tape(z, d)
    if t is None:
        return out
    return t.record("gram_diag", (z, d), out)


def kl_diag_gauss(mean, var, prior_var: float = 1.0):
    """Sum of KL( N(mean_i, var_i) || N(0, prior_var) ) over all entries."""
    mv, vv = value(mean), value(var)
    ratio = vv / prior_var
    out = np.asarray(0.5 * np.sum(ratio + mv * mv / prior_var - 1.0 - np.log(ratio)))
    t = _tape(mean, var)
    if t is None:
        return out
    return t.record("kl_diag", (mean, var), out, float(prior_var))


def scaled_kl_ratio(lam, n: float):
    """``n * (lam^2 / 2 - log lam - 1/2)``, the KL between Gaussians whose covariances differ by lam^2."""
    lv = np.asarray(value(lam), dtype=np.float64)
    d = lv - 1.0
    # rewritten around lam = 1 to avoid cancellation
    out = np.asarray(n * (0.5 * d * d + (d - np.log1p(d))))
    t = _tape(lam)
    if t is None:
        return out
    return t.record("kl_ratio", (lam,), out, float(n))


# ---------------------------------------------------------------- shape ops

def mT(a):
    """Swap the trailing two axes."""
    if not _isv(a):
        return _swap(a)
    return a.tape.record("transpose", (a,), _swap(a.value))


def reshape(a, shape):
    if not _isv(a):
        return np.reshape(a, shape)
    return a.tape.record("reshape", (a,), a.value.reshape(shape))


def broadcast_to(a, shape):
    if not _isv(a):
        return np.broadcast_to(a, shape)
    return a.tape.record("broadcast", (a,), np.broadcast_to(a.value, shape).copy())


def concat(xs, axis: int):
    t = _tape(*xs)
    vals = [value(x) for x in xs]
    if t is None:
        return np.concatenate(vals, axis=axis)
    return t.record("concat", tuple(xs), np.concatenate(vals, axis=axis), axis)


def take(a, indices, axis: int = 0):
    """Gather along ``axis`` (repeated indices allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    if not _isv(a):
        return np.take(a, indices, axis=axis)
    return a.tape.record("take", (a,), np.take(a.value, indices, axis=axis), (indices, axis))


def diag_part(a):
    """Diagonal of a square matrix as a column vector."""
    av = value(a)
    if np.ndim(av) != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"diag_part: expected square matrix, got {np.shape(av)}")
    out = np.diag(av).copy()[:, None]
    if not _isv(a):
        return out
    return a.tape.record("diag_part", (a,), out)


# ---------------------------------------------------------------- elementwise

def _unary(tag, fn):
    def op(a):
        if not _isv(a):
            return fn(np.asarray(a, dtype=np.float64))
        return a.tape.record(tag, (a,), fn(a.value))

    op.__name__ = tag
    return op


def _softplus(x):
    return np.logaddexp(0.0, x)


_sigmoid = expit


exp = _unary("exp", np.exp)
log = _unary("log", np.log)
tanh = _unary("tanh", np.tanh)
relu = _unary("relu", lambda x: np.maximum(x, 0.0))
sigmoid = _unary("sigmoid", _sigmoid)
softplus = _unary("softplus", _softplus)
square = _unary("square", np.square)
sqrt = _unary("sqrt", np.sqrt)


def identity(a):
    return a


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    if not _isv(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    return a.tape.record("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims), (axis, keepdims))


def mean(a, axis=None, keepdims: bool = False):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def logsumexp(a, axis: int = -1):
    """log-sum-exp along ``axis``; the reduced axis is kept with size one."""
    if not _isv(a):
        return _lse(np.asarray(a, dtype=np.float64), axis)
    return a.tape.record("logsumexp", (a,), _lse(a.value, axis), axis)


# ---------------------------------------------------------------- linear algebra

def cholesky(a):
    """Lower Cholesky factor of a 2-D SPD matrix."""
    out = linalg.cholesky(value(a))
    if not _isv(a):
        return out
    return a.tape.record("cholesky", (a,), out)


def tri_solve(l, b, lower: bool = True, transpose: bool = False):
    out = linalg.tri_solve(value(l), value(b), lower=lower, transpose=transpose)
    t = _tape(l, b)
    if t is None:
        return out
    return t.record("tri_solve", (l, b), out, (lower, transpose))


def spd_inverse(a):
    out = linalg.spd_inverse(value(a))
    if not _isv(a):
        return out
    return a.tape.record("spd_inverse", (a,), out)


def logdet_spd(a):
    """log det of an SPD matrix as 2 * sum(log(diag(chol(a))))."""
    return mul(sum(log(diag_part(cholesky(a)))), 2.0)


# ---------------------------------------------------------------- likelihoods

def gaussian_logpdf(x, mean, var):
    """Elementwise log N(x; mean, var)."""
    xv, mv, vv = value(x), value(mean), value(var)
    r = xv - mv
    out = -0.5 * (_LOG_2PI + np.log(vv) + r * r / vv)
    t = _tape(x, mean, var)
    if t is None:
        return out
    return t.record("gaussian_logpdf", (x, mean, var), out)


def _onehot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.intp)
    return (np.arange(n_classes)[:, None] == labels[None, :]).astype(np.float64)


def softmax_cross_entropy(logits, labels):
    """Per-example negative log-likelihood of integer ``labels``.

    ``logits`` has classes on axis -2 and examples on axis -1 (with optional
    leading sample axes). The result keeps axis -2 with size one.
    """
    lv = value(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if lv.shape[-1] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {lv.shape[-1]} logits columns vs {labels.shape[0]} labels")
    onehot = _onehot(labels, lv.shape[-2])
    lse = _lse(lv, -2)
    out = lse - np.sum(lv * onehot, axis=-2, keepdims=True)
    if not _isv(logits):
        return out
    return logits.tape.record("softmax_xent", (logits,), out, (onehot, lse))


def softmax(logits, axis: int = -2):
    return exp(sub(logits, logsumexp(logits, axis=axis)))


# ---------------------------------------------------------------- reverse rules

def _g_add(g, n):
    a, b = n.parents
    return (_unbroadcast(g, _shape(a)) if _isv(a) else None,
            _unbroadcast(g, _shape(b)) if _isv(b) else None)


def _g_sub(g, n):
    a, b = n.parents
    return (_unbroadcast(g, _shape(a)) if _isv(a) else None,
            _unbroadcast(-g, _shape(b)) if _isv(b) else None)


def _g_mul(g, n):
    a, b = n.parents
    return (_unbroadcast(g * value(b), _shape(a)) if _isv(a) else None,
            _unbroadcast(g * value(a), _shape(b)) if _isv(b) else None)


def _g_div(g, n):
    a, b = n.parents
    bv = value(b)
    return (_unbroadcast(g / bv, _shape(a)) if _isv(a) else None,
            _unbroadcast(-g * n.value / bv, _shape(b)) if _isv(b) else None)


def _g_neg(g, n):
    return (-g,)


def _mm_grads(g, av, bv, need_a, need_b):
    """Gradients of ``av @ bv`` w.r.t. both (already transposed) operands."""
    ga = gb = None
    if need_a:
        if av.ndim == 2 and bv.ndim == 3:
            # sum over the batch axis inside one BLAS call
            ga = np.tensordot(g, bv, axes=([0, 2], [0, 2]))
        else:
            ga = _unbroadcast(g @ _swap(bv), av.shape)
    if need_b:
        if bv.ndim == 2 and av.ndim == 3:
            gb = np.tensordot(av, g, axes=([0, 1], [0, 1]))
        else:
            gb = _unbroadcast(_swap(av) @ g, bv.shape)
    return ga, gb


def _g_matmul(g, n):
    a, b = n.parents
    ta, tb = n.aux
    av, bv = value(a), value(b)
    if ta:
        av = _swap(av)
    if tb:
        bv = _swap(bv)
    ga, gb = _mm_grads(g, av, bv, _isv(a), _isv(b))
    if ga is not None and ta:
        ga = _swap(ga)
    if gb is not None and tb:
        gb = _swap(gb)
    return ga, gb


def _g_matmul3(g, n):
    a, b, c = n.parents
    ta, tc, ab = n.aux
    av, bv, cv = value(a), value(b), value(c)
    if ta:
        av = _swap(av)
    if tc:
        cv = _swap(cv)
    need_ab = _isv(a) or _isv(b)
    g_ab, gc = _mm_grads(g, ab, cv, need_ab, _isv(c))
    ga = gb = None
    if need_ab:
        ga, gb = _mm_grads(g_ab, av, bv, _isv(a), _isv(b))
    if ga is not None and ta:
        ga = _swap(ga)
    if gc is not None and tc:
        gc = _swap(gc)
    return ga, gb, gc


def _g_affine(g, n):
    w, h = n.parents
    wv, hv = value(w), value(h)
    gw = gh = None
    if _isv(w):
        gw_main = _unbroadcast(g @ _swap(hv), wv.shape[:-1] + (wv.shape[-1] - 1,))
        gw_bias = _unbroadcast(g.sum(axis=-1, keepdims=True), wv.shape[:-1] + (1,))
        gw = np.concatenate([gw_main, gw_bias], axis=-1)
    if _isv(h):
        gh = _unbroadcast(_swap(wv[..., :-1]) @ g, hv.shape)
    return gw, gh


def _g_diag_scale(g, n):
    dr, x, dc = n.parents
    drv = None if dr is None else value(dr)
    dcv = None if dc is None else value(dc)
    xv = value(x)
    out = [None, None, None]
    if _isv(x):
        gx = g if drv is None else drv[:, None] * g
        out[1] = _unbroadcast(gx if dcv is None else gx * dcv, xv.shape)
    if _isv(dr) or _isv(dc):
        gxx = g * xv
        if _isv(dr):
            t = gxx if dcv is None else gxx * dcv
            out[0] = t.reshape(-1, *t.shape[-2:]).sum(axis=(0, 2))
        if _isv(dc):
            t = gxx if drv is None else drv[:, None] * gxx
            out[2] = t.reshape(-1, *t.shape[-2:]).sum(axis=(0, 1))
    return tuple(out)


def _g_gram_diag(g, n):
    z, d = n.parents
    gz = (g + g.T) @ value(z) if _isv(z) else None
    gd = 2.0 * np.diag(g) * value(d) if _isv(d) else None
    return gz, gd


def _g_kl_diag(g, n):
    mean, var = n.parents
    p = n.aux
    mv, vv = value(mean), value(var)
    shape = np.broadcast_shapes(np.shape(mv), np.shape(vv))
    gm = _unbroadcast(np.broadcast_to(g * mv / p, shape), np.shape(mv)) if _isv(mean) else None
    gv = _unbroadcast(np.broadcast_to(g * 0.5 * (1.0 / p - 1.0 / vv), shape), np.shape(vv)) if _isv(var) else None
    return gm, gv


def _g_kl_ratio(g, n):
    lv = n.parents[0].value
    return (g * n.aux * (lv - 1.0 / lv),)


def _g_transpose(g, n):
    return (_swap(g),)


def _g_reshape(g, n):
    return (g.reshape(n.parents[0].value.shape),)


def _g_broadcast(g, n):
    return (_unbroadcast(g, n.parents[0].value.shape),)


def _g_concat(g, n):
    axis = n.aux
    sizes = [np.shape(value(p))[axis] for p in n.parents]
    pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return tuple(pieces)


def _g_take(g, n):
    indices, axis = n.aux
    src = n.parents[0].value
    out = np.zeros_like(src)
    moved_out = np.moveaxis(out, axis, 0)
    np.add.at(moved_out, indices, np.moveaxis(g, axis, 0))
    return (out,)


def _g_diag_part(g, n):
    return (np.diag(g[:, 0]),)


def _g_exp(g, n):
    return (g * n.value,)


def _g_log(g, n):
    return (g / n.parents[0].value,)


def _g_tanh(g, n):
    d = np.square(n.value)
    np.subtract(1.0, d, out=d)
    d *= g
    return (d,)


def _g_relu(g, n):
    return (g * (n.parents[0].value > 0.0),)


def _g_sigmoid(g, n):
    return (g * n.value * (1.0 - n.value),)


def _g_softplus(g, n):
    return (g * _sigmoid(n.parents[0].value),)


def _g_square(g, n):
    return (2.0 * g * n.parents[0].value,)


def _g_sqrt(g, n):
    return (0.5 * g / n.value,)


def _g_sum(g, n):
    axis, keepdims = n.aux
    shape = n.parents[0].value.shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _g_logsumexp(g, n):
    x = n.parents[0].value
    return (g * np.exp(x - n.value),)


@functools.lru_cache(maxsize=64)
def _lower_mask(n: int) -> np.ndarray:
    m = np.tril(np.ones((n, n)))
    m.setflags(write=False)
    return m


def _trsolve(l, b, lower, trans):
    x, info = lapack.dtrtrs(l, b, lower=int(lower), trans=int(trans))
    if info != 0:
        raise linalg.SingularityError(f"triangular solve failed (info={info})")
    return x


def _g_cholesky(g, n):
    # symmetric-input adjoint: A_bar = sym(L^-T Phi(L^T L_bar) L^-1)
    l = n.value
    k = l.shape[0]
    phi = l.T @ g
    phi *= _lower_mask(k)
    phi.reshape(-1)[:: k + 1] *= 0.5
    l_inv, info = lapack.dtrtri(l, lower=1)
    if info != 0:
        raise linalg.SingularityError("singular Cholesky factor in reverse pass")
    s = l_inv.T @ phi @ l_inv
    return (0.5 * (s + s.T),)


def _g_tri_solve(g, n):
    l, b = n.parents
    lower, transpose = n.aux
    lv, x = value(l), n.value
    gb = _trsolve(lv, g, lower, not transpose)
    gl = None
    if _isv(l):
        gl = -(x @ gb.T) if transpose else -(gb @ x.T)
        mask = _lower_mask(gl.shape[0])
        gl *= mask if lower else mask.T
    return gl, (gb if _isv(b) else None)


def _g_spd_inverse(g, n):
    y = n.value
    ga = -(y @ g @ y)
    return (0.5 * (ga + ga.T),)


def _g_gaussian_logpdf(g, n):
    x, m, v = n.parents
    vv = value(v)
    r = value(x) - value(m)
    gx = -g * r / vv
    out = [
        _unbroadcast(gx, _shape(x)) if _isv(x) else None,
        _unbroadcast(-gx, _shape(m)) if _isv(m) else None,
        _unbroadcast(g * (0.5 * r * r / vv - 0.5) / vv, _shape(v)) if _isv(v) else None,
    ]
    return tuple(out)


def _g_softmax_xent(g, n):
    onehot, lse = n.aux
    logits = n.parents[0].value
    return (g * (np.exp(logits - lse) - onehot),)


_RULES: dict[str, Callable] = {
    "add": _g_add,
    "sub": _g_sub,
    "mul": _g_mul,
    "div": _g_div,
    "neg": _g_neg,
    "matmul": _g_matmul,
    "matmul3": _g_matmul3,
    "affine": _g_affine,
    "diag_scale": _g_diag_scale,
    "gram_diag": _g_gram_diag,
    "kl_diag": _g_kl_diag,
    "kl_ratio": _g_kl_ratio,
    "transpose": _g_transpose,
    "reshape": _g_reshape,
    "broadcast": _g_broadcast,
    "concat": _g_concat,
    "take": _g_take,
    "diag_part": _g_diag_part,
    "exp": _g_exp,
    "log": _g_log,
    "tanh": _g_tanh,
    "relu": _g_relu,
    "sigmoid": _g_sigmoid,
    "softplus": _g_softplus,
    "square": _g_square,
    "sqrt": _g_sqrt,
    "sum": _g_sum,
    "logsumexp": _g_logsumexp,
    "cholesky": _g_cholesky,
    "tri_solve": _g_tri_solve,
    "spd_inverse": _g_spd_inverse,
    "gaussian_logpdf": _g_gaussian_logpdf,
    "softmax_xent": _g_softmax_xent,
}


def supported_ops() -> frozenset[str]:
    return frozenset(_RULES)


# ---------------------------------------------------------------- checking

def record(tape: Tape, tag: str, parents, forward_value, aux=None) -> Var:
    return tape.record(tag, parents, forward_value, aux)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def gradient(f, point: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Value and reverse-mode gradient of ``f(params) -> scalar`` at ``point``."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in point.items()}
    loss = f(leaves)
    if not _isv(loss):
        raise EvaluationError("f did not depend on any parameter")
    grads = tape.backward(loss)
    return float(loss.value.reshape(())), {k: grads[v.id] for k, v in leaves.items()}


def finite_difference(f, point: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``f`` evaluated without a tape."""
    out = {}
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    for k, v in base.items():
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(base))
            flat[i] = orig - h
            fm = _scalar(f(base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[k] = g
    return out


def _scalar(x) -> float:
    val = float(np.asarray(value(x)).reshape(()))
    if not np.isfinite(val):
        raise EvaluationError(f"non-finite forward value {val}")
    return val


def grad_check(f, point: dict[str, np.ndarray], h: float = 1e-5, details: dict | None = None) -> float:
    """Largest |AD - FD| / (|FD| + 1e-8) over all parameter entries.

    If ``details`` is given it is filled with the per-parameter maxima.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    fval, ad = gradient(f, point)
    _scalar(fval)
    fd = finite_difference(f, point, h)
    worst = 0.0
    for k in point:
        err = np.abs(ad[k] - fd[k]) / (np.abs(fd[k]) + 1e-8)
        e = float(err.max()) if err.size else 0.0
        if details is not None:
            details[k] = e
        worst = max(worst, e)
    return worst
