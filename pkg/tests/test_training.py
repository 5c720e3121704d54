
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dprgnet.autodiff import Tensor, finite_difference_check, ops
from dprgnet.errors import ContractError, DivergenceError
from dprgnet.model import ParameterStore, preset
from dprgnet.priors import build_priors
from dprgnet.synth import SynthConfig, generate_stances
from dprgnet.training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    adamw_step,
    cosine_lr,
    mse_loss,
    prior_regularization,
    total_loss,
    train,
)


def test_mse_examples():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(2, 5, 6))
    assert mse_loss(y, y).item() == 0.0
    assert abs(mse_loss(y + 2, y).item() - 4.0) < 1e-12
    p = rng.normal(size=(3, 4, 6))
    total = 0.0
    for i in range(3):
        for j in range(4):
            for k in range(6):
                total += (p[i, j, k] - y[0, 0, k]) ** 2
    t = np.broadcast_to(y[0, 0], (3, 4, 6))
    assert abs(mse_loss(p, t).item() - total / 72) < 1e-12
    with pytest.raises(ContractError):
        mse_loss(p, y)


def uniform_attention(b, l, r, n):
    return Tensor(np.full((b, l, r, n), 1.0 / n))


def test_prior_regularization_zero_cases():
    cells = np.random.default_rng(0).uniform(size=(2, 4, 12))
    P = np.full((4, 6), 1 / 6)
    assert abs(prior_regularization(uniform_attention(2, 4, 6, 12), None, P, cells=cells).item()) < 1e-12


def test_prior_regularization_constructed_match():
    # 6 regions, 2 cells each; attention of region k spreads over its own cells
    rng = np.random.default_rng(1)
    l, n = 5, 12
    region_of = np.repeat(np.arange(6), 2)
    level = rng.uniform(0.5, 3.0, (l, 6))
    cells = level[:, region_of][None]
    attn = np.zeros((1, l, 6, n))
    for k in range(6):
        attn[0, :, k, region_of == k] = 0.5
    a = level + 1e-6
    P = a / a.sum(axis=1, keepdims=True)
    assert prior_regularization(Tensor(attn), None, P, cells=cells).item() < 1e-6


def test_prior_regularization_non_negative():
    rng = np.random.default_rng(2)
    for _ in range(100):
        logits = rng.normal(size=(1, 3, 6, 8))
        attn = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        P = rng.uniform(0.01, 1, (3, 6))
        P /= P.sum(axis=1, keepdims=True)
        cells = rng.uniform(0, 2, (1, 3, 8))
        assert prior_regularization(Tensor(attn), None, P, cells=cells).item() >= -1e-12


def test_total_loss_composition_and_gradient():
    rng = np.random.default_rng(3)
    pred = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    target = rng.normal(size=(2, 3, 6))
    logits = Tensor(rng.normal(size=(2, 3, 6, 4)), requires_grad=True)
    P = rng.uniform(0.1, 1, (3, 6))
    P /= P.sum(axis=1, keepdims=True)
    cells = rng.uniform(0.1, 1, (2, 3, 4))
    attn = ops.softmax(logits)
    assert total_loss(pred, target, attn, None, P, 0.0, cells=cells).item() == mse_loss(pred, target).item()
    reg = prior_regularization(attn, None, P, cells=cells).item()
    assert abs(total_loss(target, target, attn, None, P, 1.0, cells=cells).item() - reg) < 1e-15

    def f(_):
        return total_loss(pred, target, ops.softmax(logits), None, P, 0.7, cells=cells)

    assert finite_difference_check(f, pred) < 1e-4
    assert finite_difference_check(f, logits) < 1e-4


def _params(values):
    return {"p": Tensor(np.array(values, dtype=float), requires_grad=True)}


def test_adamw_fixed_point_and_decay():
    params = _params([1.0, -2.0])
    adamw_step(params, {"p": np.zeros(2)}, AdamState(), 0.01)
    np.testing.assert_array_equal(params["p"].data, [1.0, -2.0])
    adamw_step(params, {"p": np.zeros(2)}, AdamState(), 0.01, weight_decay=0.1)
    np.testing.assert_allclose(params["p"].data, [0.999, -1.998], rtol=1e-15)


def test_adamw_first_step_is_unit():
    params = _params([0.5])
    adamw_step(params, {"p": np.array([1.0])}, AdamState(), 0.001)
    assert abs(params["p"].data[0] - (0.5 - 0.001)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(g=st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=5))
def test_adamw_sign_like_without_momentum(g):
    params = _params(np.zeros(len(g)))
    adamw_step(params, {"p": np.array(g)}, AdamState(), 0.01, betas=(0.0, 0.0))
    np.testing.assert_allclose(np.abs(params["p"].data), 0.01, rtol=1e-5)


def test_adamw_nan_names_parameter():
    with pytest.raises(DivergenceError, match="'p'"):
        adamw_step(_params([1.0]), {"p": np.array([np.nan])}, AdamState(), 0.01)


def test_cosine_schedule():
    cfg = TrainConfig(max_epochs=60, base_lr=1e-3, min_lr=5e-6)
    assert cosine_lr(0, cfg) == 1e-3
    assert abs(cosine_lr(30, cfg) - (1e-3 + 5e-6) / 2) < 1e-15
    lrs = [cosine_lr(e, cfg) for e in range(60)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ContractError):
        cosine_lr(60, cfg)


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(max_epochs=5, patience=10)
    with pytest.raises(ContractError):
        TrainConfig(base_lr=1e-6, min_lr=1e-3)


def test_early_stopping_example():
    stopper = EarlyStopping(patience=1)
    losses = [1.0, 0.5, 0.6, 0.7, 0.4]
    stopped_at = None
    for epoch, v in enumerate(losses, start=1):
        if stopper.update(epoch, v):
            stopped_at = epoch
            break
    assert stopped_at == 4
    stopper = EarlyStopping(patience=1)
    assert [stopper.update(e, v) for e, v in enumerate([0.3, 0.5, 0.6], start=1)] == [False, False, True]
    assert stopper.best_epoch == 1


@settings(max_examples=50, deadline=None)
@given(losses=st.lists(st.floats(0, 10), min_size=1, max_size=30), patience=st.integers(0, 5))
def test_early_stopping_keeps_minimum(losses, patience):
    stopper = EarlyStopping(patience)
    seen = []
    for epoch, v in enumerate(losses):
        seen.append(v)
        if stopper.update(epoch, v):
            break
    assert stopper.best == min(seen)


@pytest.fixture(scope="module")
def tiny_data():
    data = generate_stances(SynthConfig(num_subjects=2, steps_per_subject=8, grid=(16, 8), stance_len=8, seed=3))
    return data.samples[:12], data.samples[12:]


def _tiny_model(variant="dprgnet"):
    return preset("desk", variant, grid_h=16, grid_w=8, stance_len=8, cnn_feature_dim=4, pos_dim=4, cop_dim=4,
                  feature_embed_dim=4, bottleneck_dim=4, regional_lstm_hidden=3, global_lstm_hidden=3)


def test_train_is_deterministic_and_restores_best(tiny_data):
    tr, va = tiny_data
    pri = build_priors(tr)
    cfg = TrainConfig(max_epochs=4, patience=4, batch_size=4, base_lr=3e-3, seed=5)
    a = train(_tiny_model(), tr, va, pri, cfg)
    b = train(_tiny_model(), tr, va, pri, cfg)
    assert a.history == b.history
    for k in a.params.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    vals = [h["val_loss"] for h in a.history]
    assert a.best_loss == min(vals) and a.history[a.best_epoch]["val_loss"] == a.best_loss


def test_resume_matches_uninterrupted(tiny_data):
    tr, va = tiny_data
    pri = build_priors(tr)
    cfg = TrainConfig(max_epochs=4, patience=4, batch_size=4, seed=1)
    full = train(_tiny_model(), tr, va, pri, cfg)
    part = train(_tiny_model(), tr, va, pri, cfg, stop_after_epoch=1)
    assert len(part.history) == 2
    resumed = train(_tiny_model(), tr, va, pri, cfg, resume=(part.params, part.state))
    assert resumed.history == full.history
    for k in full.params.params:
        np.testing.assert_array_equal(resumed.params[k].data, full.params[k].data)


def test_train_errors(tiny_data):
    tr, va = tiny_data
    with pytest.raises(ContractError):
        train(_tiny_model(), [], va, None, TrainConfig(max_epochs=1, patience=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(max_epochs=2, patience=2, batch_size=4)
    bad = [type(s)(s.pressure, s.targets * 1e300, s.speed_mps, s.subject_id) for s in tr]
    with pytest.raises(DivergenceError) as info:
        train(_tiny_model("cnn"), bad, va, None, TrainConfig(max_epochs=2, patience=2, batch_size=4,
                                                               standardize_targets=False))
    assert isinstance(info.value.last_good, ParameterStore)
