"""
Invertible Fourier neural operator.

Inputs are lifted location-wise into 2d latent channels, split into halves
and pushed through K invertible Fourier blocks. Each block is a two-step
multiplicative coupling whose scales are softplus-transformed Fourier layer
outputs, so the chain can be run backwards exactly. A second pair of MLPs
lifts outputs into the same latent space for the inverse direction.
"""
from dataclasses import dataclass, field

import numpy as np

from ifnoapp.config import ModelConfig
from ifnoapp.spectral import FourierLayerParams, check_mode_bound, fourier_layer
from ifnoapp.tensor import (
    Tensor,
    concat,
    gelu,
    kaiming_uniform,
    pointwise_linear,
    softplus_tau,
    zeros_parameter)
from ifnoapp.utils import ShapeError


@dataclass
class MLPParams:
    """
    Location-wise MLP: GELU between layers, none after the last one.
    """
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, dims, rng, dtype=np.float64):
        """
        Kaiming-uniform weights and zero biases for consecutive ``dims``.
        """
        if len(dims) < 2:
            raise ShapeError(f"an MLP needs at least one layer, got dims {dims}")
        layers = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            layers.append((kaiming_uniform(rng, (fan_in, fan_out), fan_in, dtype),
                           zeros_parameter((fan_out,), dtype)))
        return cls(layers)

    @property
    def in_features(self):
        return self.layers[0][0].shape[0]

    @property
    def out_features(self):
        return self.layers[-1][0].shape[1]

    def named_parameters(self, prefix):
        for index, (weight, bias) in enumerate(self.layers):
            yield f"{prefix}.{index}.weight", weight
            yield f"{prefix}.{index}.bias", bias


def mlp(x, p):
    """
    Apply an MLP at every location of x[..., c].
    """
    for index, (weight, bias) in enumerate(p.layers):
        x = pointwise_linear(x, weight, bias)
        if index < len(p.layers) - 1:
            x = gelu(x)
    return x


@dataclass
class InvertibleBlock:
    """
    Two Fourier layers and the softplus sharpness of one coupling block.
    """
    la: FourierLayerParams
    lb: FourierLayerParams
    tau: float = 1.0

    def __post_init__(self):
        if (self.la.channels, self.la.modes) != (self.lb.channels, self.lb.modes):
            raise ShapeError("both layers of a block need the same channels and modes")

    def named_parameters(self, prefix):
        yield from self.la.named_parameters(f"{prefix}.la")
        yield from self.lb.named_parameters(f"{prefix}.lb")


@dataclass
class IFNOModel:
    """
    All trainable operator parameters: the lifting and projection MLPs of both
    directions and the invertible block stack.
    """
    config: ModelConfig
    p_lift: MLPParams
    q_proj: MLPParams
    p_prime: MLPParams
    q_prime: MLPParams
    blocks: list

    @classmethod
    def init(cls, config, rng):
        """
        Randomly initialized model. The lifting networks are two layers of width
        ``hidden`` on inputs with two coordinate channels appended; the
        projections are two layers of width ``hidden``.
        """
        if config.blocks < 1:
            raise ShapeError("the model needs at least one invertible block")
        dtype = config.real_dtype
        width, hidden = 2 * config.d, config.hidden
        return cls(
            config=config,
            p_lift=MLPParams.init([config.c_in + 2, hidden, width], rng, dtype),
            q_proj=MLPParams.init([width, hidden, config.c_out], rng, dtype),
            p_prime=MLPParams.init([config.c_out + 2, hidden, width], rng, dtype),
            q_prime=MLPParams.init([width, hidden, config.c_in], rng, dtype),
            blocks=[InvertibleBlock(
                la=FourierLayerParams.init(config.d, config.modes, rng, dtype),
                lb=FourierLayerParams.init(config.d, config.modes, rng, dtype),
                tau=config.tau) for _ in range(config.blocks)])

    def named_parameters(self):
        """
        Yield (name, tensor) for every parameter in a fixed order.
        """
        yield from self.p_lift.named_parameters("p_lift")
        yield from self.q_proj.named_parameters("q_proj")
        yield from self.p_prime.named_parameters("p_prime")
        yield from self.q_prime.named_parameters("q_prime")
        for index, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{index}")

    def parameters(self):
        return [param for _, param in self.named_parameters()]


def count_parameters(params):
    """
    Number of real scalars in ``params``; complex entries count twice.
    """
    return sum(p.size * (2 if p.is_complex else 1) for p in params)


def grid_coords(height, width, dtype=np.float64):
    """
    Normalized sampling locations (x1, x2) in [0, 1]^2, shape [H, W, 2].
    """
    x1 = np.linspace(0.0, 1.0, height, dtype=dtype)
    x2 = np.linspace(0.0, 1.0, width, dtype=dtype)
    return np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1)


def with_coords(x):
    """
    Append the two coordinate channels to x[..., H, W, c].
    """
    height, width = x.shape[-3], x.shape[-2]
    coords = np.broadcast_to(grid_coords(height, width, x.dtype), x.shape[:-1] + (2,))
    return concat([x, Tensor(np.ascontiguousarray(coords))], axis=-1)


def split_channels(v):
    """
    Split the latent channels into first and second halves.
    """
    half = v.shape[-1] // 2
    return v[..., :half], v[..., half:]


def merge_channels(v1, v2):
    return concat([v1, v2], axis=-1)


def _lift(x, p, expected, label):
    if x.shape[-1] != expected:
        raise ShapeError(f"{label} expects {expected} channels, got shape {x.shape}")
    return split_channels(mlp(with_coords(x), p))


def lift(f, p):
    """
    Lift f[..., H, W, c_in] with the sampling locations into two halves of d
    channels each.
    """
    return _lift(f, p, p.in_features - 2, "lift")


def block_forward(v1, v2, blk):
    """
    v1' = v1 * S(La(v2)); v2' = v2 * S(Lb(v1')).
    """
    v1_next = v1 * softplus_tau(fourier_layer(v2, blk.la), blk.tau)
    v2_next = v2 * softplus_tau(fourier_layer(v1_next, blk.lb), blk.tau)
    return v1_next, v2_next


def block_inverse(v1_next, v2_next, blk):
    """
    Exact inverse of block_forward: v2 is recovered first, then v1.
    """
    v2 = v2_next / softplus_tau(fourier_layer(v1_next, blk.lb), blk.tau)
    v1 = v1_next / softplus_tau(fourier_layer(v2, blk.la), blk.tau)
    return v1, v2


def forward_chain(v1, v2, blocks):
    for blk in blocks:
        v1, v2 = block_forward(v1, v2, blk)
    return v1, v2


def inverse_chain(v1, v2, blocks):
    for blk in reversed(blocks):
        v1, v2 = block_inverse(v1, v2, blk)
    return v1, v2


def _check_grid(x, model):
    height, width = x.shape[-3], x.shape[-2]
    check_mode_bound(height, width, model.config.modes)


def forward_latents(f, model):
    """
    Latents (v1_K, v2_K) after the forward block chain.
    """
    _check_grid(f, model)
    v1, v2 = lift(f, model.p_lift)
    return forward_chain(v1, v2, model.blocks)


def forward_predict(f, model):
    """
    Forward prediction: lift f, run the block chain forward and project to u.
    """
    v1, v2 = forward_latents(f, model)
    return mlp(merge_channels(v1, v2), model.q_proj)


def lift_output(u, model):
    """
    Lift u[..., H, W, c_out] with p_prime into the latent space of the last block.
    """
    return _lift(u, model.p_prime, model.config.c_out, "inverse lift")


def inverse_latent(u, model):
    """
    Deterministic inverse prediction: lift u, undo the block chain and project to f.
    """
    _check_grid(u, model)
    v1, v2 = lift_output(u, model)
    v1, v2 = inverse_chain(v1, v2, model.blocks)
    return mlp(merge_channels(v1, v2), model.q_prime)
