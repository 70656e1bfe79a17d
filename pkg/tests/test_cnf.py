import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from conftest import central_difference, max_relative_error
from neural_mcmc.cnf import (
    CnfArch,
    CouplingLayer,
    FlowStack,
    coupling_forward,
    coupling_inverse,
    flow_forward,
    flow_inverse,
    flow_sample,
    frozen_mask,
    load_flow,
    log_prob,
    nll_loss,
    save_flow,
    train_cnf,
)
from neural_mcmc.errors import CheckpointError, ContractError, DimensionError, EvaluationError
from neural_mcmc.nn import AdamState, TrainConfig, adam_step

SMALL = CnfArch(n_flows=4, cond_widths=(6,), hidden_width=5, merge_width=5)


def constant_layer(n_h, n_par, k, s_value=0.0, t_value=0.0):
    """Coupling layer whose scale and shift nets output constants."""
    layer = CouplingLayer.build(n_h, n_par, k, SMALL, np.random.default_rng(0))
    for mlp in layer.named_mlps().values():
        for dense in mlp.layers:
            dense.weights.data[:] = 0.0
            dense.bias.data[:] = 0.0
    layer.scale.head.layers[-1].bias.data[:] = math.atanh(s_value)
    layer.translate.head.layers[-1].bias.data[:] = t_value
    return layer


def identity_stack(n_h=4, n_par=2, n_flows=2):
    return FlowStack([constant_layer(n_h, n_par, k) for k in range(n_flows)])


def random_stack(n_h, n_par, seed, arch=SMALL, weight_scale=1.0):
    stack = FlowStack.build(n_h, n_par, arch, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1)
    for t in stack.parameter_set().tensors():
        t.data = t.data * weight_scale + 0.1 * r.normal(size=t.shape)
    return stack


def numerical_log_det(fn, h, step=1e-6):
    n = h.size
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        jac[:, j] = (fn(h + e) - fn(h - e)) / (2 * step)
    return np.linalg.slogdet(jac)[1]


def test_masks_alternate():
    assert frozen_mask(4, 0).tolist() == [True, False, True, False]
    assert frozen_mask(4, 1).tolist() == [False, True, False, True]
    assert frozen_mask(5, 0).sum() == 3
    stack = FlowStack.build(6, 2, SMALL, np.random.default_rng(0))
    for a, b in zip(stack.layers, stack.layers[1:]):
        assert np.array_equal(a.mask, ~b.mask)


def test_zero_coupling_is_identity(rng):
    layer = constant_layer(4, 2, 0)
    h, lam = rng.normal(size=4), rng.normal(size=2)
    h2, ld = coupling_forward(layer, h, lam)
    assert np.array_equal(h2, h)
    assert ld == 0.0
    assert np.array_equal(coupling_inverse(layer, h, lam), h)


def test_constant_scale_coupling(rng):
    c = 0.4
    layer = constant_layer(4, 2, 0, s_value=c)
    h, lam = rng.normal(size=4), rng.normal(size=2)
    h2, ld = coupling_forward(layer, h, lam)
    assert np.allclose(h2[layer.active], h[layer.active] * math.exp(c))
    assert np.array_equal(h2[layer.frozen], h[layer.frozen])
    assert ld == pytest.approx(2 * c)


def test_constant_scale_and_shift_inverse(rng):
    c, d = -0.3, 1.7
    layer = constant_layer(4, 2, 1, s_value=c, t_value=d)
    a = rng.normal(size=4)
    shifted = a.copy()
    shifted[layer.active] = a[layer.active] * math.exp(c) + d
    assert np.allclose(coupling_inverse(layer, shifted, rng.normal(size=2)), a, atol=1e-15)


def test_coupling_log_det_matches_jacobian(rng):
    layer = random_stack(4, 3, 11).layers[0]
    lam = rng.normal(size=3)
    for h in rng.normal(size=(5, 4)):
        _, ld = coupling_forward(layer, h, lam)
        numeric = numerical_log_det(lambda v: coupling_forward(layer, v, lam)[0], h)
        assert abs(ld - numeric) < 1e-6


def test_identity_stack(rng):
    stack = identity_stack()
    h, lam = rng.normal(size=4), rng.normal(size=2)
    z, ld = flow_forward(stack, h, lam)
    assert np.array_equal(z, h) and ld == 0.0
    assert np.array_equal(flow_inverse(stack, h, lam), h)


def test_log_det_is_additive(rng):
    c1, c2 = 0.25, -0.6
    stack = FlowStack([constant_layer(4, 2, 0, c1), constant_layer(4, 2, 1, c2)])
    _, ld = flow_forward(stack, rng.normal(size=4), rng.normal(size=2))
    assert ld == pytest.approx(2 * c1 + 2 * c2)


@pytest.mark.parametrize("n_h", [2, 4, 6])
def test_stack_log_det_matches_jacobian(n_h):
    rng = np.random.default_rng(n_h)
    stack = random_stack(n_h, 3, 20 + n_h)
    lam = rng.normal(size=3)
    for h in rng.normal(size=(4, n_h)):
        _, ld = flow_forward(stack, h, lam)
        numeric = numerical_log_det(lambda v: flow_forward(stack, v, lam)[0], h)
        assert abs(ld - numeric) <= 1e-5 * max(1.0, abs(numeric))


def test_round_trip_thousand_pairs(rng):
    stack = random_stack(6, 4, 3, arch=CnfArch(n_flows=8, cond_widths=(8, 8), hidden_width=8, merge_width=8))
    h, lam = 2 * rng.normal(size=(1000, 6)), rng.normal(size=(1000, 4))
    z, _ = flow_forward(stack, h, lam)
    assert np.abs(flow_inverse(stack, z, lam) - h).max() < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), n_h=st.integers(2, 7), n_par=st.integers(1, 4))
def test_bijectivity_property(seed, n_h, n_par):
    r = np.random.default_rng(seed)
    stack = random_stack(n_h, n_par, seed)
    h, lam = r.normal(size=(20, n_h)), r.normal(size=(20, n_par))
    assert np.abs(flow_inverse(stack, flow_forward(stack, h, lam)[0], lam) - h).max() < 1e-8


def test_single_layer_inverse_is_coupling_inverse(rng):
    layer = random_stack(4, 2, 5).layers[1]
    stack = FlowStack([layer])
    z, lam = rng.normal(size=4), rng.normal(size=2)
    assert np.array_equal(flow_inverse(stack, z, lam), coupling_inverse(layer, z, lam))


def test_identity_log_prob_values():
    stack = identity_stack()
    assert log_prob(stack, np.zeros(4), np.zeros(2)) == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-12)
    assert log_prob(stack, np.array([1.0, 0, 0, 0]), np.zeros(2)) == pytest.approx(-4.175754, abs=1e-6)


def test_density_normalizes():
    stack = random_stack(2, 1, 8, weight_scale=1.5)
    lam = np.array([0.7])
    g = np.linspace(-10, 10, 801)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    dens = np.exp(log_prob(stack, pts, np.repeat(lam[None], len(pts), axis=0)))
    mass = dens.sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=0.02)


def test_nll_examples(rng):
    stack = identity_stack()
    loss = nll_loss(stack, np.zeros((5, 4)), np.zeros((5, 2)))
    assert loss.item() == pytest.approx(2 * math.log(2 * math.pi))
    h, lam = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
    flow = random_stack(4, 2, 1)
    once = nll_loss(flow, h, lam).item()
    doubled = nll_loss(flow, np.vstack([h, h]), np.vstack([lam, lam])).item()
    assert doubled == pytest.approx(once, rel=1e-14)
    with pytest.raises(ContractError):
        nll_loss(flow, np.zeros((0, 4)), np.zeros((0, 2)))


def test_graph_and_array_paths_agree(rng):
    stack = random_stack(5, 3, 2)
    h, lam = rng.normal(size=(7, 5)), rng.normal(size=(7, 3))
    assert np.allclose(-nll_loss(stack, h, lam).item(), log_prob(stack, h, lam).mean(), atol=1e-12)


@pytest.mark.parametrize("n_h", [2, 3, 4])
def test_nll_gradient_matches_finite_differences(n_h):
    r = np.random.default_rng(40 + n_h)
    stack = random_stack(n_h, 2, 30 + n_h, arch=CnfArch(n_flows=3, cond_widths=(4,), hidden_width=3, merge_width=3))
    h, lam = r.normal(size=(6, n_h)), r.normal(size=(6, 2))
    tensors = stack.parameter_set().tensors()
    nll_loss(stack, h, lam).backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = central_difference(lambda: nll_loss(stack, h, lam).item(), [t.data for t in tensors])
    assert max_relative_error(analytic, numeric) < 1e-4


def test_one_adam_step_reduces_loss(rng):
    stack = random_stack(4, 2, 9)
    h, lam = rng.normal(size=(64, 4)), rng.normal(size=(64, 2))
    tensors = stack.parameter_set().tensors()
    before = nll_loss(stack, h, lam)
    before.backward()
    adam_step(tensors, [t.grad for t in tensors], AdamState.zeros_like(tensors), 1e-3)
    assert nll_loss(stack, h, lam).item() < before.item()


def test_dimension_checks(rng):
    stack = random_stack(4, 2, 0)
    with pytest.raises(DimensionError):
        flow_forward(stack, np.zeros(3), np.zeros(2))
    with pytest.raises(DimensionError):
        log_prob(stack, np.zeros(4), np.zeros(3))
    with pytest.raises(ContractError):
        FlowStack.build(1, 2, SMALL, rng)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_density_raises():
    stack = identity_stack()
    with pytest.raises(EvaluationError):
        log_prob(stack, np.array([np.inf, 0, 0, 0]), np.zeros(2))


def test_identity_samples_are_standard_normal():
    h = flow_sample(identity_stack(), np.zeros((10_000, 2)), np.random.default_rng(0))
    for j in range(4):
        assert kstest(h[:, j], "norm").pvalue > 0.01


def test_sampling(rng):
    stack = random_stack(4, 2, 6)
    lam = rng.normal(size=2)
    a = flow_sample(stack, lam, np.random.default_rng(3))
    b = flow_sample(stack, lam, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.isfinite(log_prob(stack, a, lam))


def test_zero_epochs_returns_initial_stack(rng):
    h, lam = rng.normal(size=(20, 4)), rng.normal(size=(20, 2))
    cfg = TrainConfig(max_epochs=0, seed=5)
    stack, _ = train_cnf(h, lam, cfg, SMALL)
    fresh = FlowStack.build(4, 2, SMALL, np.random.default_rng([5, 0]))
    for a, b in zip(stack.parameter_set().tensors(), fresh.parameter_set().tensors()):
        assert np.array_equal(a.data, b.data)


@pytest.fixture(scope="module")
def toy_flow():
    """Flow trained on h | lam ~ N(lam, 0.1 I) in two dimensions."""
    r = np.random.default_rng(0)
    lam = r.normal(size=(4000, 2))
    h = lam + math.sqrt(0.1) * r.normal(size=lam.shape)
    arch = CnfArch(n_flows=4, cond_widths=(16,), hidden_width=16, merge_width=16)
    cfg = TrainConfig(batch_size=64, max_epochs=40, initial_lr=1e-3, weight_decay=0.0, l2_rate=0.0, patience=10, seed=1)
    stack, _ = train_cnf(h, lam, cfg, arch)
    lam_test = r.normal(size=(1000, 2))
    h_test = lam_test + math.sqrt(0.1) * r.normal(size=lam_test.shape)
    return stack, h_test, lam_test, r


def test_toy_flow_separates_labels(toy_flow):
    stack, h, lam, r = toy_flow
    correct = log_prob(stack, h, lam).mean()
    shuffled = log_prob(stack, h, lam[r.permutation(len(lam))]).mean()
    assert correct - shuffled >= 1.0


def test_toy_flow_matches_analytic_density(toy_flow):
    stack, h, lam, _ = toy_flow
    analytic = -np.log(2 * math.pi * 0.1) - np.sum((h - lam) ** 2, axis=1) / (2 * 0.1)
    assert np.mean(np.abs(log_prob(stack, h, lam) - analytic)) < 0.2


def test_training_on_draws_uses_variance(rng):
    mu, lam = rng.normal(size=(50, 4)), rng.normal(size=(50, 2))
    cfg = TrainConfig(max_epochs=2, seed=0)
    a, _ = train_cnf(mu, lam, cfg, SMALL)
    b, _ = train_cnf(mu, lam, cfg, SMALL, h_log_variance=np.full((50, 4), -1.0))
    assert not np.array_equal(a.parameter_set().tensors()[0].data, b.parameter_set().tensors()[0].data)


def test_checkpoint_round_trip(tmp_path, rng):
    stack = random_stack(4, 3, 7)
    save_flow(tmp_path / "f.ckpt", stack, SMALL, {"seed": 7})
    back = load_flow(tmp_path / "f.ckpt")
    for (na, a), (nb, b) in zip(stack.parameter_set().named, back.parameter_set().named):
        assert na == nb and np.array_equal(a.data, b.data)
    h, lam = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    assert np.array_equal(log_prob(stack, h, lam), log_prob(back, h, lam))


def test_checkpoint_missing_array(tmp_path):
    from neural_mcmc.nn.checkpoint import load_arrays, save_arrays

    stack = random_stack(4, 2, 1)
    save_flow(tmp_path / "f.ckpt", stack)
    header, arrays = load_arrays(tmp_path / "f.ckpt")
    arrays.pop("layer0.cond.0.weights")
    header.pop("arrays")
    header.pop("format_version")
    save_arrays(tmp_path / "g.ckpt", header, arrays)
    with pytest.raises(CheckpointError):
        load_flow(tmp_path / "g.ckpt")
