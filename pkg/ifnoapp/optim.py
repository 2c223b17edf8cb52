"""
Adam and AdamW on named tape parameters, with per-epoch learning-rate schedules.

Complex parameters are updated through their interleaved real view, so the
moments of the real and imaginary parts are tracked separately.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ifnoapp.utils import NonFiniteGradientError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """
    Moments, step counter and hyperparameters of one optimizer run.
    ``decoupled`` selects AdamW weight decay instead of an L2 gradient term.
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config):
        """
        Fresh state from a TrainConfig.
        """
        return cls(lr=config.lr, weight_decay=config.weight_decay,
                   decoupled=config.optimizer == "adamw")


def _real(array):
    array = np.ascontiguousarray(array)
    if np.iscomplexobj(array):
        return array.view(array.real.dtype)
    return array


def adam_step(named_params, state):
    """
    One bias-corrected Adam update of every parameter from its ``grad``.

    :param named_params: Iterable of (name, Tensor) pairs.
    :param state: AdamState, updated in place.
    :raises NonFiniteGradientError: A gradient holds NaN or infinity; no
        parameter is modified in that case.
    """
    named_params = list(named_params)
    grads = {}
    for name, param in named_params:
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        grad = _real(grad).astype(_real(param.data).dtype, copy=True)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
        grads[name] = grad

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in named_params:
        if not param.data.flags.c_contiguous:
            param.data = np.ascontiguousarray(param.data)
        values = _real(param.data)
        g = grads[name]
        if state.weight_decay and not state.decoupled:
            g += state.weight_decay * values
        if name not in state.m:
            state.m[name] = np.zeros_like(values)
            state.v[name] = np.zeros_like(values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay and state.decoupled:
            values -= state.lr * state.weight_decay * values
        values -= (state.lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)


def zero_grads(params):
    for param in params:
        param.grad = None


class ExponentialDecay:
    """
    Multiply the learning rate by ``factor`` after every epoch.
    """

    def __init__(self, factor):
        self.factor = factor

    def step(self, state, epoch_loss):
        state.lr *= self.factor


class ReduceOnPlateau:
    """
    Multiply the learning rate by ``factor`` once the epoch loss has not
    improved for ``patience`` epochs.
    """

    def __init__(self, factor, patience):
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def step(self, state, epoch_loss):
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.stale = 0
            return
        self.stale += 1
        if self.stale >= self.patience:
            state.lr *= self.factor
            self.stale = 0
            logger.info("Loss plateaued, learning rate reduced to %.3e", state.lr)


def create_schedule(config):
    """
    Learning-rate schedule selected by ``config.lr_schedule``.
    """
    if config.lr_schedule == "plateau":
        return ReduceOnPlateau(config.plateau_factor, config.plateau_patience)
    return ExponentialDecay(config.lr_decay)
