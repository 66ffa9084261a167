import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inducing_weights import autodiff as ad
from inducing_weights.linalg import RngStream, ShapeError
from inducing_weights.matrix_normal import conditional_kl_R


def _spd(b):
    return ad.add(ad.matmul(b, b, tb=True), 3.0 * np.eye(3))


W = RngStream(99).normal((5, 5))  # fixed weights turn matrix outputs into scalars


def _wsum(x):
    return ad.sum(ad.mul(x, W[: np.shape(ad.value(x))[0], : np.shape(ad.value(x))[1]]))


OPS = {
    "add": lambda p: _wsum(ad.add(p["a"], p["b"])),
    "sub": lambda p: _wsum(ad.sub(p["a"], p["b"])),
    "mul": lambda p: _wsum(ad.mul(p["a"], p["b"])),
    "div": lambda p: _wsum(ad.div(p["a"], ad.add(ad.square(p["b"]), 1.0))),
    "scale": lambda p: _wsum(ad.scale(p["a"], 2.5)),
    "neg": lambda p: _wsum(ad.neg(p["a"])),
    "matmul": lambda p: _wsum(ad.matmul(p["a"], p["b"])),
    "matmul_t": lambda p: _wsum(ad.matmul(p["a"], p["b"], ta=True, tb=True)),
    "matmul3": lambda p: _wsum(ad.matmul3(p["a"], p["b"], p["a"], ta=True, tc=True)),
    "affine": lambda p: _wsum(ad.affine(p["a"], p["c"])),
    "diag_scale": lambda p: _wsum(ad.diag_scale(p["d"], p["a"], ad.exp(p["d"]))),
    "gram_diag": lambda p: _wsum(ad.gram_diag(p["a"], p["d"])),
    "kl_diag": lambda p: ad.kl_diag_gauss(p["a"], ad.exp(p["b"]), 2.0),
    "kl_ratio": lambda p: ad.scaled_kl_ratio(ad.sigmoid(p["s"]), 6.0),
    "transpose": lambda p: _wsum(ad.mT(p["a"])),
    "reshape": lambda p: _wsum(ad.reshape(ad.reshape(p["a"], (9,)), (3, 3))),
    "broadcast": lambda p: _wsum(ad.broadcast_to(ad.reshape(p["d"], (1, 3)), (3, 3))),
    "concat": lambda p: _wsum(ad.concat([p["a"], p["c"]], axis=0)),
    "take": lambda p: _wsum(ad.take(p["a"], np.array([2, 0, 2]), axis=0)),
    "diag_part": lambda p: ad.sum(ad.square(ad.diag_part(p["a"]))),
    "exp": lambda p: _wsum(ad.exp(p["a"])),
    "log": lambda p: _wsum(ad.log(ad.add(ad.square(p["a"]), 0.5))),
    "tanh": lambda p: _wsum(ad.tanh(p["a"])),
    "relu": lambda p: _wsum(ad.relu(ad.add(p["a"], 0.05))),
    "sigmoid": lambda p: _wsum(ad.sigmoid(p["a"])),
    "softplus": lambda p: _wsum(ad.softplus(p["a"])),
    "square": lambda p: _wsum(ad.square(p["a"])),
    "sqrt": lambda p: _wsum(ad.sqrt(ad.add(ad.square(p["a"]), 0.3))),
    "sum_axis": lambda p: ad.sum(ad.square(ad.sum(p["a"], axis=0))),
    "mean": lambda p: ad.sum(ad.square(ad.mean(p["a"], axis=1, keepdims=True))),
    "logsumexp": lambda p: ad.sum(ad.square(ad.logsumexp(p["a"], axis=0))),
    "cholesky": lambda p: _wsum(ad.cholesky(_spd(p["a"]))),
    "tri_solve": lambda p: _wsum(ad.tri_solve(ad.cholesky(_spd(p["a"])), p["b"])),
    "tri_solve_t": lambda p: _wsum(ad.tri_solve(ad.cholesky(_spd(p["a"])), p["b"], transpose=True)),
    "spd_inverse": lambda p: _wsum(ad.spd_inverse(_spd(p["a"]))),
    "logdet": lambda p: ad.logdet_spd(_spd(p["a"])),
    "gaussian_logpdf": lambda p: ad.sum(ad.gaussian_logpdf(W[:3, :3], p["a"], ad.exp(p["b"]))),
    "softmax_xent": lambda p: ad.sum(ad.softmax_cross_entropy(p["a"], np.array([0, 2, 1]))),
    "softmax": lambda p: _wsum(ad.softmax(p["a"])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_central_differences(name):
    for seed in range(3):
        r = RngStream(seed, 5)
        point = {"a": r.normal((3, 3)), "b": r.normal((3, 3)), "c": r.normal((2, 3)), "d": r.normal(3), "s": r.normal(())}
        assert ad.grad_check(OPS[name], point, h=1e-5) < 1e-4


def test_sum_of_squares_example():
    _, g = ad.gradient(lambda p: ad.sum(ad.mul(p["x"], p["x"])), {"x": np.array([[1.0, 2.0]])})
    np.testing.assert_allclose(g["x"], [[2.0, 4.0]])


def test_logdet_gradient_is_inverse():
    _, g = ad.gradient(lambda p: ad.logdet_spd(p["A"]), {"A": np.diag([2.0, 3.0])})
    np.testing.assert_allclose(g["A"], [[0.5, 0.0], [0.0, 1.0 / 3.0]], atol=1e-12)


def test_grad_check_examples():
    assert ad.grad_check(lambda p: ad.sum(ad.mul(p["x"], 3.0)), {"x": RngStream(1).normal((3, 3))}) < 1e-10
    err = ad.grad_check(lambda p: conditional_kl_R(p["lam"], 3, 2), {"lam": np.array(0.7)})
    assert err < 1e-6
    _, g = ad.gradient(lambda p: conditional_kl_R(p["lam"], 3, 2), {"lam": np.array(0.7)})
    assert g["lam"] == pytest.approx(6 * (0.7 - 1 / 0.7), rel=1e-12)


def test_grad_check_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        ad.grad_check(lambda p: ad.sum(p["x"]), {"x": np.ones(2)}, h=1e-2)
    with pytest.raises(ad.EvaluationError), np.errstate(invalid="ignore"):
        ad.grad_check(lambda p: ad.sum(ad.log(p["x"])), {"x": -np.ones(2)})


def test_record_shapes_and_errors():
    t = ad.Tape()
    a, b = t.leaf(np.ones((2, 2))), t.leaf(np.ones((2, 2)))
    assert ad.add(a, b).shape == (2, 2)
    x, y = t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 1)))
    assert ad.matmul(x, y).shape == (2, 1)
    with pytest.raises(ShapeError):
        ad.matmul(x, x)
    with pytest.raises(ValueError):
        ad.add(a, ad.Tape().leaf(np.ones((2, 2))))


def test_parents_precede_children():
    t = ad.Tape()
    a = t.leaf(np.ones((2, 2)))
    ad.sum(ad.tanh(ad.matmul(a, a)))
    for i, node in enumerate(t.nodes):
        assert all(p.id < i for p in node.parents if isinstance(p, ad.Var))


def test_unsupported_op_names_tag():
    t = ad.Tape()
    a = t.leaf(np.ones((2, 2)))
    out = ad.record(t, "mystery", (a,), np.ones((1, 1)))
    with pytest.raises(ad.UnsupportedOpError, match="mystery"):
        ad.backward(t, out)


def test_backward_requires_scalar():
    t = ad.Tape()
    with pytest.raises(ShapeError):
        t.backward(ad.tanh(t.leaf(np.ones((2, 2)))))


def test_constant_inputs_give_arrays():
    out = ad.tanh(np.zeros((2, 2)))
    assert isinstance(out, np.ndarray)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_backward_is_linear(seed):
    x0 = RngStream(seed).normal((3, 3))
    f1, f2 = OPS["tanh"], OPS["cholesky"]
    _, g1 = ad.gradient(f1, {"a": x0})
    _, g2 = ad.gradient(f2, {"a": x0})
    _, g12 = ad.gradient(lambda p: ad.add(f1(p), f2(p)), {"a": x0})
    np.testing.assert_allclose(g12["a"], g1["a"] + g2["a"], atol=1e-12)


def test_fixed_noise_gives_identical_gradients():
    eps = RngStream(3).normal((4, 3, 3))

    def f(p):
        w = ad.add(p["m"], ad.mul(ad.softplus(p["s"]), eps))
        return ad.sum(ad.tanh(ad.matmul(w, w)))

    point = {"m": RngStream(4).normal((3, 3)), "s": RngStream(5).normal((3, 3))}
    _, g1 = ad.gradient(f, point)
    _, g2 = ad.gradient(f, point)
    for k in point:
        assert np.array_equal(g1[k], g2[k])
