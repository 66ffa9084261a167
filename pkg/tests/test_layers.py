import numpy as np
import pytest

from inducing_weights import autodiff as ad
from inducing_weights.layers import (
    BayesLayer, ConfigError, LayerShape, Likelihood, Network, VariantConfig, _inv_softplus, init_layer,
    layer_kl, reshape_conv, sample_u,
)
from inducing_weights.linalg import RngStream, ShapeError
from inducing_weights.matrix_normal import conditional_projections, joint_vec_covariance, psi


def _layer(kind="ffg_u", d_in=3, d_out=2, bias=False, rng=None, **kw):
    kw.setdefault("M_in", 2)
    kw.setdefault("M_out", 2)
    return init_layer(LayerShape(d_in, d_out, bias), VariantConfig(kind=kind, **kw), rng or RngStream(0))


def _net(layer, act="identity", lik=None):
    return Network([layer], [act], lik or Likelihood("gaussian", 0.01))


# ---------------------------------------------------------------- shapes and configs

@pytest.mark.parametrize("meta,d_out,d_in", [((64, 3, 3, 3), 64, 27), ((10, 1, 1, 1), 10, 1), ((512, 512, 3, 3), 512, 4608)])
def test_reshape_conv(meta, d_out, d_in):
    s = reshape_conv(meta)
    assert (s.d_out, s.d_in) == (d_out, d_in)


def test_reshape_conv_rejects_zero():
    with pytest.raises(ShapeError):
        reshape_conv((4, 0, 3, 3))


def test_shape_and_config_validation():
    with pytest.raises(ShapeError):
        LayerShape(0, 3)
    with pytest.raises(ShapeError):
        LayerShape(10, 4, conv_meta=(4, 2, 2, 2))
    with pytest.raises(ConfigError):
        VariantConfig(kind="bogus")
    with pytest.raises(ConfigError):
        VariantConfig(kind="ffg_u")  # no M
    with pytest.raises(ConfigError):
        VariantConfig(kind="ensemble_u", M_in=2, M_out=2, K=1)
    with pytest.raises(ConfigError):
        VariantConfig(kind="ffg_u", M_in=2, M_out=2, lambda_max=0.1, lambda_init=0.5)
    with pytest.raises(ConfigError):
        _layer("fcg_w", d_in=30, d_out=20)
    with pytest.raises(ShapeError):
        Network([_layer(d_out=2), _layer(d_in=3)], ["tanh", "identity"], Likelihood())


# ---------------------------------------------------------------- init

def test_ffg_u_init_values():
    layer = _layer("ffg_u", d_in=4, d_out=3, M_in=3, M_out=2)
    np.testing.assert_allclose(ad.value(layer.ffg_u_var()), 1e-3, rtol=1e-12)
    prior = layer.prior()
    np.testing.assert_allclose(prior.D_r, 1e-3, rtol=1e-12)
    np.testing.assert_allclose(prior.D_c, 1e-3, rtol=1e-12)
    assert layer.params["Z_r"].shape == (2, 3) and layer.params["Z_c"].shape == (3, 4)


def test_z_init_variance():
    layer = _layer("ffg_u", d_in=400, d_out=300, M_in=16, M_out=16)
    for key in ("Z_r", "Z_c"):
        z = layer.params[key]
        assert abs(z.var() - 1 / 16) < 0.1 / 16


def test_ensemble_members_distinct():
    layer = _layer("ensemble_u", K=5)
    u = layer.params["u_members"]
    d = np.linalg.norm(u[:, None] - u[None, :], axis=(-1, -2))
    assert np.all(d[~np.eye(5, dtype=bool)] > 0)


def test_ffg_w_init_and_cap():
    layer = _layer("ffg_w", sigma_max=0.5)
    std = ad.value(layer.ffg_w_std())
    np.testing.assert_allclose(std, 1e-4, rtol=1e-9)
    layer.params["std_raw"] = layer.params["std_raw"] + 1e3
    assert np.all(ad.value(layer.ffg_w_std()) <= 0.5)


def test_init_is_seeded():
    a = _layer("fcg_u", rng=RngStream(5))
    b = _layer("fcg_u", rng=RngStream(5))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_lambda_capped_and_pinned():
    layer = _layer("ffg_u", lambda_max=0.1, lambda_init=0.05)
    np.testing.assert_allclose(ad.value(layer.lam()), 0.05, rtol=1e-12)
    layer.params["lam_raw"] = np.array(50.0)
    assert ad.value(layer.lam()) <= 0.1
    pinned = _layer("ffg_u", lambda_max=0.0)
    assert pinned.lam() == 0.0
    assert pinned.kl_terms()[0] == 0.0


# ---------------------------------------------------------------- sample_u

def test_sample_u_ffg_small_variance_gives_mean():
    layer = _layer("ffg_u")
    layer.params["u_var_raw"][:] = -200.0
    u, idx = sample_u(layer, RngStream(1))
    assert idx is None
    mean_u, _ = sample_u(layer, RngStream(2))
    np.testing.assert_allclose(u, mean_u, atol=1e-30)


def test_sample_u_ffg_moments():
    layer = _layer("ffg_u", init_var_u=0.3)
    n = 100_000
    u_white, _ = layer.sample_u_white(layer.params, n, RngStream(3))
    u_white = ad.value(u_white)
    m, v = layer.params["u_mean"], ad.value(layer.ffg_u_var())
    z_mean = np.abs(u_white.mean(0) - m) / np.sqrt(v / n)
    z_var = np.abs(u_white.var(0) - v) / (v * np.sqrt(2 / n))
    assert z_mean.max() < 4.5 and z_var.max() < 4.5


def test_ensemble_round_robin():
    layer = _layer("ensemble_u", K=5)
    _, idx = sample_u(layer, RngStream(0), n=5)
    assert sorted(idx.tolist()) == [0, 1, 2, 3, 4]
    _, idx = sample_u(layer, RngStream(0), n=5, offset=3)
    assert idx.tolist() == [3, 4, 0, 1, 2]


# ---------------------------------------------------------------- forward

def test_deterministic_identity_forward():
    layer = _layer("deterministic", d_in=3, d_out=3)
    layer.params["W"] = np.eye(3)
    X = RngStream(1).normal((3, 7))
    out = _net(layer).forward(X, 4, RngStream(0))
    assert ad.value(out).shape == (4, 3, 7)
    np.testing.assert_array_equal(ad.value(out)[2], X)


def test_forward_noise_off_is_deterministic():
    layer = _layer("ffg_u", lambda_max=0.0)
    layer.params["u_var_raw"][:] = -1000.0
    net = _net(layer)
    X = RngStream(1).normal((3, 5))
    outs = np.concatenate([ad.value(net.forward(X, 1, RngStream(s))) for s in range(10)])
    assert np.ptp(outs, axis=0).max() == 0.0


def test_forward_seeded_reproducibility():
    net = Network.mlp([2, 6, 1], [VariantConfig("fcg_u", M_in=2, M_out=3)] * 2, ["tanh", "identity"],
                      Likelihood(), RngStream(4))
    X = RngStream(5).normal((2, 9))
    a = ad.value(net.forward(X, 3, RngStream(11)))
    b = ad.value(net.forward(X, 3, RngStream(11)))
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_bad_inputs():
    net = _net(_layer())
    with pytest.raises(ShapeError):
        net.forward(np.zeros((4, 2)), 1, RngStream(0))
    with pytest.raises(ValueError):
        net.forward(np.zeros((3, 2)), 0, RngStream(0))


@pytest.mark.parametrize("lam", [1.0, 0.4])
def test_push_forward_mean(lam):
    # a 3x2 inducing layer: E[W X] = P_r E[U] P_c X
    layer = _layer("ffg_u", d_in=2, d_out=3, M_in=2, M_out=2, lambda_max=None, lambda_init=lam, init_var_u=0.2)
    net = _net(layer)
    X = RngStream(6).normal((2, 4))
    n = 40_000
    outs = ad.value(net.forward(X, n, RngStream(7)))
    prior = layer.prior()
    p_r, p_c = conditional_projections(prior)
    psi_r, psi_c = psi(prior)
    l_r, l_c = np.linalg.cholesky(psi_r), np.linalg.cholesky(psi_c)
    expected = p_r @ l_r @ layer.params["u_mean"] @ l_c.T @ p_c @ X
    se = outs.std(0) / np.sqrt(n)
    assert np.max(np.abs(outs.mean(0) - expected) / se) < 5.0


def test_bias_column_is_used():
    layer = _layer("deterministic", d_in=2, d_out=1, bias=True)
    layer.params["W"] = np.array([[0.0, 0.0, 3.0]])
    out = ad.value(_net(layer).forward(np.zeros((2, 4)), 1, RngStream(0)))
    np.testing.assert_array_equal(out, 3.0)


# ---------------------------------------------------------------- KL

def test_kl_whitened_standard_is_zero():
    layer = _layer("ffg_u", lambda_max=None, lambda_init=1.0)
    layer.params["u_mean"][:] = 0.0
    layer.params["u_var_raw"][:] = _inv_softplus(1.0)
    assert abs(layer_kl(layer)) < 1e-12


def test_kl_scalar_ffg():
    layer = _layer("ffg_w", d_in=1, d_out=1, prior_std=1.0)
    layer.params["mean"][:] = 1.0
    layer.params["std_raw"][:] = _inv_softplus(1.0)
    assert layer_kl(layer) == pytest.approx(0.5, abs=1e-12)


def test_kl_ensemble_is_r_only():
    layer = _layer("ensemble_u", d_in=2, d_out=3, lambda_max=1.0, lambda_init=0.5)
    assert layer_kl(layer) == pytest.approx(1.908883, abs=1e-6)


@pytest.mark.parametrize("kind", ["ffg_w", "fcg_w", "ffg_u", "fcg_u"])
def test_gaussian_kl_nonnegative(kind):
    layer = _layer(kind, rng=RngStream(9))
    assert layer_kl(layer) >= 0.0


def test_network_kl_is_sum_of_layers():
    kinds = ["ffg_u", "ensemble_u", "ffg_w"]
    net = Network.mlp([3, 4, 4, 2], [VariantConfig(k, M_in=2, M_out=2) for k in kinds],
                      ["tanh", "tanh", "identity"], Likelihood("categorical"), RngStream(2))
    total = float(ad.value(net.kl()))
    assert total == pytest.approx(sum(layer_kl(layer) for layer in net.layers), rel=1e-14)


# ---------------------------------------------------------------- bookkeeping

def test_n_params_by_variant():
    assert _layer("deterministic", d_in=3, d_out=2, bias=True).n_params() == 8
    assert _layer("ffg_w", d_in=10, d_out=10).n_params() == 200
    assert _layer("fcg_w", d_in=3, d_out=2).n_params() == 6 + 21
    # Z: 2*2 + 2*3, D: 4, lambda: 1, q(U): 2*4
    assert _layer("ffg_u", d_in=3, d_out=2).n_params() == 10 + 4 + 1 + 8
    assert _layer("ensemble_u", d_in=3, d_out=2, K=3).n_params() == 10 + 4 + 1 + 12


def test_n_params_counts_masks_as_free():
    layer = _layer("ffg_u", d_in=3, d_out=2)
    before = layer.n_params()
    layer.masks["Z_c"] = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    assert layer.n_params() == before - 3


def test_checkpoint_round_trip_bit_exact(tmp_path):
    configs = [VariantConfig("ffg_u", M_in=3, M_out=2, sigma_max=0.5), VariantConfig("ensemble_u", M_in=2, M_out=1)]
    net = Network.mlp([2, 5, 1], configs, ["relu", "identity"], Likelihood("gaussian", 0.05), RngStream(3))
    net.layers[0].masks["Z_r"] = np.ones((2, 5))
    path = tmp_path / "ckpt.json"
    net.save(path)
    back = Network.load(path)
    assert back.activations == net.activations and back.likelihood == net.likelihood
    for a, b in zip(net.layers, back.layers):
        assert a.config == b.config and a.shape == b.shape
        for k in a.params:
            assert a.params[k].shape == b.params[k].shape
            assert a.params[k].tobytes() == b.params[k].tobytes()
        for k in a.masks:
            assert a.masks[k].tobytes() == b.masks[k].tobytes()
    X = RngStream(8).normal((2, 3))
    np.testing.assert_array_equal(ad.value(net.forward(X, 2, RngStream(1))), ad.value(back.forward(X, 2, RngStream(1))))


def test_checkpoint_rejects_unknown_format():
    with pytest.raises(ConfigError):
        Network.from_dict({"format": "other"})


def test_layer_prior_keeps_marginal():
    layer = _layer("ffg_u", d_in=3, d_out=2, prior_std=0.7)
    cov = joint_vec_covariance(layer.prior())
    np.testing.assert_allclose(cov[:6, :6], 0.49 * np.eye(6), atol=1e-12)


def test_bayes_layer_repr():
    assert "ffg_u" in repr(_layer())
    assert isinstance(_layer(), BayesLayer)
