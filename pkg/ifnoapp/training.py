"""
Loss functions and the three-step training schedule.

Stage 1 fits the invertible operator on the supervised losses, stage 2 fits
the VAE on the inputs alone and stage 3 fine-tunes everything on the joint
loss. Every stage starts a fresh optimizer and draws its batch order and
latent noise from a generator seeded with (seed, stage).
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ifnoapp.constants import DIVERGENCE_LIMIT
from ifnoapp.ifno import (
    IFNOModel,
    forward_predict,
    inverse_latent,
    lift,
    lift_output,
    merge_channels,
    mlp)
from ifnoapp.optim import AdamState, adam_step, create_schedule, zero_grads
from ifnoapp.tensor import Tape, Tensor, as_tensor, frob_norm, reduce
from ifnoapp.utils import ConfigError, DivergenceError, ShapeError
from ifnoapp.vae import VAEParams, decode, encode, kl_divergence, reparameterize

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3)


@dataclass
class LossReport:
    """
    Values of every loss term; terms a stage does not use stay 0.
    """
    j_fwd: float = 0.0
    j_inv: float = 0.0
    j_pq: float = 0.0
    j_p2q: float = 0.0
    j_kl: float = 0.0
    j_rec: float = 0.0
    total: float = 0.0
    epoch: int = 0
    stage: int = 0

    TERMS = ("j_fwd", "j_inv", "j_pq", "j_p2q", "j_kl", "j_rec", "total")

    def csv_row(self):
        values = ",".join(repr(float(getattr(self, term))) for term in self.TERMS)
        return f"{self.epoch},{self.stage},{values}"

    @classmethod
    def average(cls, reports, weights, epoch, stage):
        """
        Weighted mean of batch reports.
        """
        total_weight = float(sum(weights))
        values = {term: sum(w * getattr(r, term) for r, w in zip(reports, weights)) / total_weight
                  for term in cls.TERMS}
        return cls(epoch=epoch, stage=stage, **values)


@dataclass
class TrainingResult:
    model: IFNOModel
    vae: VAEParams
    history: list = field(default_factory=list)
    seed: int = 0

    def stage_history(self, stage):
        return [report for report in self.history if report.stage == stage]


def _target_norms(target, axis):
    norms = np.sqrt(np.sum(np.abs(target.data) ** 2, axis=axis))
    if np.any(norms == 0):
        raise ValueError("relative L2 error is undefined for a zero target")
    return norms


def rel_l2(pred, target):
    """
    ||pred - target||_F / ||target||_F, differentiable in ``pred``.
    """
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    norm = _target_norms(target, None)
    return frob_norm(pred - target) / float(norm)


def sample_rel_l2(pred, target):
    """
    Relative L2 error of every sample along the leading axis.
    """
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    axes = tuple(range(1, pred.ndim))
    norms = _target_norms(target, axes)
    return frob_norm(pred - target, axis=axes) / Tensor(norms.astype(pred.dtype))


def batch_rel_l2(pred, target):
    """
    Batch mean of the per-sample relative L2 errors.
    """
    return reduce(sample_rel_l2(pred, target), "mean")


def _supervised_terms(f, u, model):
    v1, v2 = lift(f, model.p_lift)
    w1, w2 = lift_output(u, model)
    j_pq = batch_rel_l2(mlp(merge_channels(v1, v2), model.q_prime), f)
    j_p2q = batch_rel_l2(mlp(merge_channels(w1, w2), model.q_proj), u)
    j_fwd = batch_rel_l2(forward_predict(f, model), u)
    return j_fwd, j_pq, j_p2q


def loss_ifb(f, u, model):
    """
    Forward, inverse and both lift/project consistency errors on a batch
    f[B, H, W, c_in], u[B, H, W, c_out].

    :return: (scalar loss tensor, LossReport)
    """
    if f.shape[0] == 0:
        raise ShapeError("empty batch")
    j_fwd, j_pq, j_p2q = _supervised_terms(f, u, model)
    j_inv = batch_rel_l2(inverse_latent(u, model), f)
    total = j_fwd + j_inv + j_pq + j_p2q
    report = LossReport(j_fwd=j_fwd.item(), j_inv=j_inv.item(), j_pq=j_pq.item(),
                        j_p2q=j_p2q.item(), total=total.item())
    return total, report


def _vae_terms(x, target, vae, beta, eps):
    posterior = encode(x, vae.encoder)
    z = reparameterize(posterior, eps)
    kl = kl_divergence(posterior)
    rec = sample_rel_l2(decode(z, vae.decoder), target)
    j_vae = reduce(kl * beta + rec, "mean")
    return j_vae, reduce(kl, "mean"), reduce(rec, "mean")


def loss_vae(f, vae, beta, eps):
    """
    Batch mean of beta * KL + relative reconstruction error, with one
    reparameterized sample per item.

    :param eps: Standard normal draws of shape [B, z_dim].
    :return: (scalar loss tensor, LossReport)
    """
    if f.shape[0] == 0:
        raise ShapeError("empty batch")
    j_vae, kl, rec = _vae_terms(f, f, vae, beta, eps)
    return j_vae, LossReport(j_kl=kl.item(), j_rec=rec.item(), total=j_vae.item())


def loss_joint(f, u, model, vae, beta, eps):
    """
    Forward and consistency errors plus the VAE loss, where the encoder sees the
    inverse-chain latent of u and the decoder reconstructs f.
    The deterministic inverse error is reported but not optimized.

    :return: (scalar loss tensor, LossReport)
    """
    if f.shape[0] == 0:
        raise ShapeError("empty batch")
    j_fwd, j_pq, j_p2q = _supervised_terms(f, u, model)
    inverse = inverse_latent(u, model)
    j_vae, kl, rec = _vae_terms(inverse, f, vae, beta, eps)
    total = j_fwd + j_pq + j_p2q + j_vae
    j_inv = sample_rel_l2(Tensor(inverse.data), f).data.mean()
    report = LossReport(j_fwd=j_fwd.item(), j_inv=float(j_inv), j_pq=j_pq.item(),
                        j_p2q=j_p2q.item(), j_kl=kl.item(), j_rec=rec.item(),
                        total=total.item())
    return total, report


def init_models(model_config, seed):
    """
    Randomly initialized operator and VAE for ``seed``.
    """
    rng = np.random.default_rng([seed, 0])
    return IFNOModel.init(model_config, rng), VAEParams.init(model_config, rng)


def stage_parameters(stage, model, vae):
    """
    Named parameters optimized in ``stage``.
    """
    if stage == 1:
        return list(model.named_parameters())
    if stage == 2:
        return list(vae.named_parameters())
    return list(model.named_parameters()) + list(vae.named_parameters())


def _batch_loss(stage, f, u, model, vae, beta, rng):
    if stage == 1:
        return loss_ifb(f, u, model)
    eps = rng.standard_normal((f.shape[0], model.config.z_dim)).astype(f.dtype)
    if stage == 2:
        return loss_vae(f, vae, beta, eps)
    return loss_joint(f, u, model, vae, beta, eps)


def _check_divergence(stage, epoch, value):
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(stage, epoch, value)


def train_stage(stage, f, u, model, vae, config):
    """
    Run every epoch of one stage.

    :param f: Normalized inputs [N, H, W, c_in].
    :param u: Normalized outputs [N, H, W, c_out].
    :return: One LossReport per epoch.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage}")
    count = f.shape[0]
    if config.batch > count:
        raise ConfigError(f"batch size {config.batch} exceeds the {count} training samples")
    rng = np.random.default_rng([config.seed, stage])
    params = stage_parameters(stage, model, vae)
    tensors = [param for _, param in params]
    state = AdamState.from_config(config)
    schedule = create_schedule(config)

    history = []
    for epoch in range(1, config.epochs(stage) + 1):
        order = rng.permutation(count)
        reports, weights = [], []
        for start in range(0, count, config.batch):
            index = order[start:start + config.batch]
            zero_grads(tensors)
            with Tape() as tape:
                loss, report = _batch_loss(stage, Tensor(f[index]), Tensor(u[index]),
                                           model, vae, config.beta, rng)
                _check_divergence(stage, epoch, report.total)
                tape.backward(loss)
            adam_step(params, state)
            reports.append(report)
            weights.append(len(index))
        summary = LossReport.average(reports, weights, epoch, stage)
        _check_divergence(stage, epoch, summary.total)
        schedule.step(state, summary.total)
        logger.info("stage %d epoch %d: loss %.6e (lr %.3e)", stage, epoch, summary.total, state.lr)
        history.append(summary)
    return history


def train_three_step(f, u, model, vae, config, start_stage=1, history=None,
                     checkpoint_hook=None):
    """
    Train from ``start_stage`` through stage 3.

    :param history: Reports of stages completed by an earlier run.
    :param checkpoint_hook: Called as hook(stage, model, vae, history) after
        every stage.
    :return: TrainingResult
    """
    history = list(history or [])
    for stage in STAGES:
        if stage < start_stage:
            continue
        logger.info("Starting training stage %d", stage)
        history.extend(train_stage(stage, f, u, model, vae, config))
        if checkpoint_hook is not None:
            checkpoint_hook(stage, model, vae, history)
    return TrainingResult(model=model, vae=vae, history=history, seed=config.seed)
