"""
Tests for the losses, the optimizer and the three-step schedule.
"""
import numpy as np
import pytest

from ifnoapp.ifno import IFNOModel
from ifnoapp.optim import AdamState, ExponentialDecay, ReduceOnPlateau, adam_step, create_schedule
from ifnoapp.tensor import Tape, Tensor, grad_check_params, reduce, square
from ifnoapp.training import (
    LossReport,
    batch_rel_l2,
    init_models,
    loss_ifb,
    loss_joint,
    loss_vae,
    rel_l2,
    stage_parameters,
    train_three_step)
from ifnoapp.utils import ConfigError, DivergenceError, NonFiniteGradientError, ShapeError
from ifnoapp.vae import VAEParams
from tests.utils import random_batch, small_model_config, small_train_config

GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-4


@pytest.fixture
def models():
    return init_models(small_model_config(), seed=3)


@pytest.fixture
def batch():
    f, u = random_batch(seed=9)
    return Tensor(f), Tensor(u)


def _zero(params):
    for param in params:
        param.data = np.zeros_like(param.data)


def test_rel_l2_examples():
    target = Tensor(np.array([[3.0, -4.0], [1.0, 2.0]]))
    assert rel_l2(Tensor(target.data.copy()), target).item() == 0.0
    assert rel_l2(Tensor(np.zeros((2, 2))), target).item() == pytest.approx(1.0)
    assert rel_l2(Tensor(2.0 * target.data), target).item() == pytest.approx(1.0)
    for alpha in (0.0, 0.5, 3.0):
        assert rel_l2(Tensor(alpha * target.data), target).item() == pytest.approx(abs(alpha - 1.0))


def test_rel_l2_errors():
    with pytest.raises(ValueError):
        rel_l2(Tensor(np.ones(3)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        rel_l2(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_batch_rel_l2_averages_samples():
    target = np.ones((2, 2, 2, 1))
    pred = target.copy()
    pred[1] = 3.0
    assert batch_rel_l2(Tensor(pred), target).item() == pytest.approx(1.0)


def test_zero_model_ifb_loss_is_four(models, batch):
    model, _ = models
    _zero(model.parameters())
    total, report = loss_ifb(*batch, model)
    assert total.item() == 4.0
    assert (report.j_fwd, report.j_inv, report.j_pq, report.j_p2q) == (1.0, 1.0, 1.0, 1.0)


def test_ifb_loss_gradient(models, batch):
    model, _ = models
    assert grad_check_params(lambda: loss_ifb(*batch, model)[0], model.parameters(),
                             max_coords=4, floor=GRAD_FLOOR) < GRAD_TOL


def test_vae_loss_gradient(models, batch):
    _, vae = models
    eps = np.random.default_rng(2).standard_normal((2, 4))
    assert grad_check_params(lambda: loss_vae(batch[0], vae, 0.1, eps)[0], vae.parameters(),
                             max_coords=4, floor=GRAD_FLOOR) < GRAD_TOL


def test_joint_loss_gradient(models, batch):
    model, vae = models
    eps = np.random.default_rng(2).standard_normal((2, 4))
    params = model.parameters() + vae.parameters()
    assert grad_check_params(lambda: loss_joint(*batch, model, vae, 0.1, eps)[0], params,
                             max_coords=3, floor=GRAD_FLOOR) < GRAD_TOL


def test_vae_loss_with_prior_posterior(models, batch):
    _, vae = models
    for weight, bias in (vae.encoder.mu_head, vae.encoder.logvar_head):
        _zero([weight, bias])
    total, report = loss_vae(batch[0], vae, 0.0, np.zeros((2, 4)))
    assert report.j_kl == 0.0
    assert total.item() == pytest.approx(report.j_rec)


def test_joint_loss_decomposes(models, batch):
    model, vae = models
    eps = np.random.default_rng(5).standard_normal((2, 4))
    total, report = loss_joint(*batch, model, vae, 0.5, eps)
    expected = report.j_fwd + report.j_pq + report.j_p2q + 0.5 * report.j_kl + report.j_rec
    assert total.item() == pytest.approx(expected)
    assert report.j_inv > 0.0


def test_empty_batch_is_rejected(models):
    model, vae = models
    empty = Tensor(np.zeros((0, 8, 8, 1)))
    with pytest.raises(ShapeError):
        loss_ifb(empty, empty, model)
    with pytest.raises(ShapeError):
        loss_vae(empty, vae, 0.1, np.zeros((0, 4)))


def test_adam_on_quadratic():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    losses = []
    for _ in range(100):
        x.grad = None
        with Tape() as tape:
            loss = reduce(square(x), "sum")
            tape.backward(loss)
        losses.append(loss.item())
        adam_step([("x", x)], state)
    assert all(later < earlier for earlier, later in zip(losses[:8], losses[1:8]))
    assert losses[-1] < 0.1 * losses[0]
    assert state.step == 100


def test_adam_zero_gradient_and_weight_decay():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    x.zero_grad()
    state = AdamState(lr=0.1)
    adam_step([("x", x)], state)
    assert np.array_equal(x.data, [2.0, -1.0])
    assert state.step == 1

    decayed = AdamState(lr=0.1, weight_decay=0.5, decoupled=True)
    adam_step([("x", x)], decayed)
    assert np.allclose(x.data, [2.0 * 0.95, -1.0 * 0.95])


def test_adam_rejects_non_finite_gradient():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    x.grad = np.array([np.nan, 0.0])
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as excinfo:
        adam_step([("blocks.0.la.w", x)], state)
    assert "blocks.0.la.w" in str(excinfo.value)
    assert np.array_equal(x.data, [1.0, 1.0])
    assert state.step == 0


def test_adam_updates_complex_parameters():
    w = Tensor(np.array([1.0 + 1.0j, -1.0 - 2.0j]), requires_grad=True)
    w.grad = np.array([1.0 + 0.0j, 0.0 - 1.0j])
    state = AdamState(lr=0.1)
    adam_step([("w", w)], state)
    assert state.m["w"].shape == (4,)
    assert np.allclose(w.data, [0.9 + 1.0j, -1.0 - 1.9j])


def test_schedules():
    state = AdamState(lr=1.0)
    ExponentialDecay(0.5).step(state, 1.0)
    assert state.lr == 0.5
    plateau = ReduceOnPlateau(factor=0.1, patience=2)
    for loss in (1.0, 2.0, 2.0):
        plateau.step(state, loss)
    assert state.lr == pytest.approx(0.05)
    assert isinstance(create_schedule(small_train_config(lr_schedule="plateau")), ReduceOnPlateau)
    assert isinstance(create_schedule(small_train_config()), ExponentialDecay)


def test_loss_report_row():
    report = LossReport(j_fwd=0.5, total=0.5, epoch=3, stage=1)
    assert report.csv_row() == "3,1,0.5,0.0,0.0,0.0,0.0,0.0,0.5"
    merged = LossReport.average([LossReport(total=1.0), LossReport(total=4.0)], [1, 2], 1, 2)
    assert merged.total == pytest.approx(3.0)


def test_stage_parameters(models):
    model, vae = models
    assert len(stage_parameters(1, model, vae)) == len(list(model.named_parameters()))
    assert len(stage_parameters(2, model, vae)) == len(list(vae.named_parameters()))
    assert len(stage_parameters(3, model, vae)) == \
        len(list(model.named_parameters())) + len(list(vae.named_parameters()))


def test_one_epoch_per_stage(models):
    f, u = random_batch(seed=1)
    model, vae = models
    result = train_three_step(f, u, model, vae, small_train_config())
    assert [len(result.stage_history(stage)) for stage in (1, 2, 3)] == [1, 1, 1]
    assert all(np.isfinite(report.total) for report in result.history)


def _snapshot(model, vae):
    return [param.data.copy() for param in model.parameters() + vae.parameters()]


def test_training_is_deterministic():
    f, u = random_batch(seed=1, batch=4)
    config = small_train_config(epochs1=2, epochs2=2, epochs3=2)
    snapshots = []
    for _ in range(2):
        model, vae = init_models(small_model_config(), seed=5)
        train_three_step(f, u, model, vae, config)
        snapshots.append(_snapshot(model, vae))
    assert all(np.array_equal(a, b) for a, b in zip(*snapshots))


def test_resume_reproduces_uninterrupted_run():
    f, u = random_batch(seed=2, batch=4)
    config = small_train_config(epochs1=2, epochs2=2, epochs3=2)
    saved = {}

    def hook(stage, model, vae, history):
        saved[stage] = (_snapshot(model, vae), list(history))

    model, vae = init_models(small_model_config(), seed=5)
    train_three_step(f, u, model, vae, config, checkpoint_hook=hook)
    final = _snapshot(model, vae)

    resumed_model, resumed_vae = init_models(small_model_config(), seed=99)
    params = resumed_model.parameters() + resumed_vae.parameters()
    for param, data in zip(params, saved[2][0]):
        param.data = data.copy()
    result = train_three_step(f, u, resumed_model, resumed_vae, config, start_stage=3,
                              history=saved[2][1])
    assert all(np.array_equal(a, b) for a, b in zip(final, _snapshot(resumed_model, resumed_vae)))
    assert len(result.history) == 6


def test_stage_one_reduces_loss():
    f, u = random_batch(seed=4, batch=4)
    model, vae = init_models(small_model_config(), seed=0)
    config = small_train_config(lr=1e-2, batch=4, epochs1=20, epochs2=1, epochs3=1)
    result = train_three_step(f, u, model, vae, config)
    stage1 = result.stage_history(1)
    assert stage1[-1].total < stage1[0].total


def test_vae_training_reduces_loss():
    rng = np.random.default_rng(8)
    f = rng.uniform(0.5, 2.0, size=(10, 1, 1, 1)) * np.ones((10, 8, 8, 1))
    vae = VAEParams.init(small_model_config(), np.random.default_rng(1))
    state = AdamState(lr=1e-2)
    noise = np.random.default_rng(2)
    losses = []
    for _ in range(50):
        for param in vae.parameters():
            param.grad = None
        with Tape() as tape:
            loss, _ = loss_vae(Tensor(f), vae, 1e-3, noise.standard_normal((10, 4)))
            tape.backward(loss)
        losses.append(loss.item())
        adam_step(vae.named_parameters(), state)
    assert losses[-1] < losses[0]


def test_divergence_names_stage_and_epoch(models):
    f, u = random_batch(seed=1)
    f[0, 0, 0, 0] = np.nan
    model, vae = models
    with pytest.raises(DivergenceError) as excinfo:
        train_three_step(f, u, model, vae, small_train_config())
    assert (excinfo.value.stage, excinfo.value.epoch) == (1, 1)
    assert excinfo.value.exit_code == 4


def test_batch_larger_than_dataset(models):
    f, u = random_batch(seed=1)
    model, vae = models
    with pytest.raises(ConfigError):
        train_three_step(f, u, model, vae, small_train_config(batch=3))


def test_models_share_configuration():
    model, vae = init_models(small_model_config(), seed=0)
    assert isinstance(model, IFNOModel)
    assert vae.encoder.z_dim == model.config.z_dim
