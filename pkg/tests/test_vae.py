import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, max_relative_error
from neural_mcmc.errors import CheckpointError, ContractError, DimensionError
from neural_mcmc.nn import DenseLayer, Mlp, TrainConfig
from neural_mcmc.vae import (
    IVaeModel,
    LatentGaussian,
    VaeArch,
    ivae_loss,
    kl_term,
    load_ivae,
    reparameterize,
    save_ivae,
    train_ivae,
)

TINY = VaeArch(latent_dim=3, encoder_widths=(5,), decoder_widths=(4,), predictor_widths=(4,))


def zero_model(n_x=4, n_h=2, n_par=3):
    def zeros(a, b, act="tanh"):
        return DenseLayer(np.zeros((a, b)), np.zeros(b), act)

    return IVaeModel(
        Mlp([zeros(n_x, 5)]),
        zeros(5, n_h, "linear"),
        zeros(5, n_h, "linear"),
        Mlp([zeros(n_h, 4), zeros(4, n_x, "linear")]),
        Mlp([zeros(n_h, 4), zeros(4, n_par, "linear")]),
    )


def tiny_model(seed=0, **kw):
    return IVaeModel.build(6, 2, TINY, np.random.default_rng(seed), **kw)


def test_zero_heads_give_standard_latent(rng):
    latent = zero_model().encode(rng.normal(size=4))
    assert np.array_equal(latent.mean, np.zeros(2))
    assert np.array_equal(latent.log_variance, np.zeros(2))
    assert np.array_equal(latent.variance, np.ones(2))


def test_encode_repeatable_and_shaped(rng):
    model = tiny_model()
    x = rng.normal(size=(5, 6))
    a, b = model.encode(x), model.encode(x)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_variance, b.log_variance)
    assert a.mean.shape == a.log_variance.shape == (5, 3)
    assert model.encode(x[0]).mean.shape == (3,)


def test_encode_rejects_wrong_width():
    with pytest.raises(DimensionError):
        tiny_model().encode(np.zeros(5))


def test_reparameterize_examples():
    latent = LatentGaussian(np.array([0.7, -1.0]), np.array([0.3, 2.0]))
    assert np.array_equal(reparameterize(latent, np.zeros(2)), latent.mean)
    unit = LatentGaussian(np.zeros(3), np.zeros(3))
    assert np.array_equal(reparameterize(unit, np.full(3, 2.0)), np.full(3, 2.0))
    scaled = LatentGaussian(np.array([1.0]), np.array([math.log(4.0)]))
    assert reparameterize(scaled, np.array([0.5]))[0] == pytest.approx(2.0)


def test_zero_network_decodes_and_predicts_zero(rng):
    model = zero_model()
    h = rng.normal(size=(3, 2))
    assert np.array_equal(model.decode(h), np.zeros((3, 4)))
    assert np.array_equal(model.predict(h), np.zeros((3, 3)))
    assert model.decode(h[0]).shape == (4,)
    assert model.predict(h[0]).shape == (3,)


def test_predict_deterministic(rng):
    model = tiny_model()
    h = rng.normal(size=(4, 3))
    assert np.array_equal(model.predict(h), model.predict(h))


def test_kl_examples():
    assert kl_term(LatentGaussian(np.zeros(4), np.zeros(4))) == 0.0
    assert kl_term(LatentGaussian(np.array([1.0]), np.array([0.0]))) == pytest.approx(0.5)
    assert kl_term(LatentGaussian(np.array([0.0]), np.array([1.0]))) == pytest.approx(0.359141, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(
    mu=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
    data=st.data(),
)
def test_kl_nonnegative(mu, data):
    logvar = data.draw(st.lists(st.floats(-5, 5), min_size=len(mu), max_size=len(mu)))
    kl = kl_term(LatentGaussian(np.array(mu), np.array(logvar)))
    assert kl >= 0
    if kl == 0:
        assert np.allclose(mu, 0) and np.allclose(logvar, 0)


def mc_kl(latent, n, rng):
    """Sample average of log q(h) - log p(h) over ``n`` Latin-hypercube draws from q."""
    from scipy.stats import norm, qmc

    eps = norm.ppf(qmc.LatinHypercube(d=latent.mean.size, seed=rng).random(n))
    std = np.exp(0.5 * latent.log_variance)
    h = latent.mean + std * eps
    log_q = norm.logpdf(h, loc=latent.mean, scale=std).sum(axis=1)
    log_p = norm.logpdf(h).sum(axis=1)
    return float(np.mean(log_q - log_p))


def test_kl_matches_monte_carlo():
    r = np.random.default_rng(7)
    for _ in range(20):
        latent = LatentGaussian(r.normal(size=3), r.uniform(-1.5, 1.5, size=3))
        exact = kl_term(latent)
        assert abs(mc_kl(latent, 100_000, r) - exact) <= 0.01 * exact


def test_loss_vanishes_for_perfect_stub():
    model = zero_model()
    total, parts = ivae_loss(model, np.zeros((3, 4)), np.zeros((3, 3)), eps=np.zeros((3, 2)))
    assert total.item() == 0.0
    assert parts == {"mse": 0.0, "kl": 0.0, "pred": 0.0, "total": 0.0}


def test_zero_betas_leave_reconstruction(rng):
    model = tiny_model(beta_kl=0.0, beta_pred=0.0)
    x, lam, eps = rng.normal(size=(4, 6)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    _, parts = ivae_loss(model, x, lam, eps=eps)
    assert parts["total"] == parts["mse"]


def test_prediction_weight_is_linear(rng):
    x, lam, eps = rng.normal(size=(4, 6)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    one = tiny_model(beta_pred=0.3)
    two = tiny_model(beta_pred=0.6)
    _, p1 = ivae_loss(one, x, lam, eps=eps)
    _, p2 = ivae_loss(two, x, lam, eps=eps)
    rest1 = p1["total"] - p1["mse"] - one.beta_kl * p1["kl"]
    rest2 = p2["total"] - p2["mse"] - two.beta_kl * p2["kl"]
    assert rest2 == pytest.approx(2 * rest1, rel=1e-12)


def test_sigma_x_scales_reconstruction(rng):
    x, lam, eps = rng.normal(size=(4, 6)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    _, a = ivae_loss(tiny_model(sigma_x=1.0), x, lam, eps=eps)
    _, b = ivae_loss(tiny_model(sigma_x=2.0), x, lam, eps=eps)
    assert b["mse"] == pytest.approx(a["mse"] / 4)


def test_loss_needs_batch_and_noise():
    with pytest.raises(ContractError):
        ivae_loss(tiny_model(), np.zeros((0, 6)), np.zeros((0, 2)), eps=np.zeros((0, 3)))
    with pytest.raises(ContractError):
        ivae_loss(tiny_model(), np.zeros((1, 6)), np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    model = tiny_model(seed, beta_kl=0.3, beta_pred=0.2)
    model.fit_standardization(r.normal(size=(20, 6)))
    x, lam, eps = r.normal(size=(5, 6)), r.normal(size=(5, 2)), r.normal(size=(5, 3))
    tensors = model.parameter_set().tensors()
    total, _ = ivae_loss(model, x, lam, eps=eps)
    total.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = central_difference(lambda: ivae_loss(model, x, lam, eps=eps)[0].item(), [t.data for t in tensors])
    assert max_relative_error(analytic, numeric) < 1e-4


def test_zero_prediction_weight_gives_zero_predictor_gradient(rng):
    model = tiny_model(beta_pred=0.0)
    total, _ = ivae_loss(model, rng.normal(size=(4, 6)), rng.normal(size=(4, 2)), eps=rng.normal(size=(4, 3)))
    total.backward()
    for name, t in model.parameter_set().named:
        if name.startswith("predictor"):
            assert not np.any(t.grad)


@pytest.fixture(scope="module")
def darcy_data():
    from neural_mcmc.darcy import StructuredMesh
    from neural_mcmc.field import build_basis
    from neural_mcmc.pipeline.dataset import generate_dataset

    mesh = StructuredMesh.unit_square(11)
    basis = build_basis(mesh.coordinates, 0.25, 4)
    return generate_dataset(basis, mesh, 400, np.random.default_rng(0))


def test_training_reduces_loss(darcy_data):
    arch = VaeArch(latent_dim=4, encoder_widths=(32, 16), decoder_widths=(16, 32), predictor_widths=(16,))
    cfg = TrainConfig(batch_size=32, max_epochs=15, patience=15, seed=3)
    model, result = train_ivae(darcy_data.inputs, darcy_data.labels, cfg, arch)
    train = [h["train_loss"] for h in result.history]
    smooth = np.convolve(train[:10], np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0)

    untrained = IVaeModel.build(81, 4, arch, np.random.default_rng([cfg.seed, 0]))
    untrained.fit_standardization(darcy_data.inputs)
    val = result.val_indices
    eps = np.random.default_rng(5).standard_normal((len(val), 4))
    before = ivae_loss(untrained, darcy_data.inputs[val], darcy_data.labels[val], eps=eps)[1]["mse"]
    after = ivae_loss(model, darcy_data.inputs[val], darcy_data.labels[val], eps=eps)[1]["mse"]
    assert after < before


def test_training_deterministic(darcy_data):
    cfg = TrainConfig(max_epochs=2, seed=1)
    a, _ = train_ivae(darcy_data.inputs[:100], darcy_data.labels[:100], cfg, TINY)
    b, _ = train_ivae(darcy_data.inputs[:100], darcy_data.labels[:100], cfg, TINY)
    for (_, ta), (_, tb) in zip(a.parameter_set().named, b.parameter_set().named):
        assert np.array_equal(ta.data, tb.data)


def test_standardization_uses_training_statistics(darcy_data):
    model, _ = train_ivae(darcy_data.inputs, darcy_data.labels, TrainConfig(max_epochs=0), TINY)
    assert np.allclose(model.x_mean, darcy_data.inputs.mean(axis=0))
    const = darcy_data.inputs.std(axis=0) == 0
    assert np.all(model.x_std[const] == 1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    model = tiny_model(4)
    model.fit_standardization(rng.normal(size=(30, 6)))
    save_ivae(tmp_path / "v.ckpt", model, {"seed": 4})
    back = load_ivae(tmp_path / "v.ckpt")
    for (_, a), (_, b) in zip(model.parameter_set().named, back.parameter_set().named):
        assert np.array_equal(a.data, b.data)
    x = rng.normal(size=(3, 6))
    assert np.array_equal(model.encode(x).mean, back.encode(x).mean)
    assert back.beta_kl == model.beta_kl and np.array_equal(back.x_std, model.x_std)


def test_checkpoint_wrong_kind(tmp_path):
    from neural_mcmc.nn.checkpoint import save_arrays

    save_arrays(tmp_path / "x.ckpt", {"kind": "flow"}, {})
    with pytest.raises(CheckpointError):
        load_ivae(tmp_path / "x.ckpt")
