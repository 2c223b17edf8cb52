"""
Beta-VAE head: a strided convolutional Gaussian encoder and a transposed
convolutional decoder over [B, H, W, c] fields.
"""
from dataclasses import dataclass

import numpy as np

from ifnoapp.fft import is_power_of_two
from ifnoapp.tensor import (
    Tensor,
    conv2d,
    conv_transpose2d,
    exp,
    gelu,
    kaiming_uniform,
    pointwise_linear,
    reduce,
    square,
    zeros_parameter)
from ifnoapp.utils import ShapeError

KERNEL = 3


def encoder_depth(grid, available):
    """
    Number of stride-2 layers: one per halving while the spatial size stays
    at least 2, and no more than the configured channel list.
    """
    if not is_power_of_two(grid) or grid < 4:
        raise ShapeError(f"VAE grid must be a power of two >= 4, got {grid}")
    return min(available, int(np.log2(grid)) - 1)


def _conv_params(rng, c_in, c_out, dtype):
    return (kaiming_uniform(rng, (KERNEL, KERNEL, c_in, c_out), KERNEL * KERNEL * c_in, dtype),
            zeros_parameter((c_out,), dtype))


def _linear_params(rng, fan_in, fan_out, dtype):
    return (kaiming_uniform(rng, (fan_in, fan_out), fan_in, dtype),
            zeros_parameter((fan_out,), dtype))


@dataclass
class EncoderParams:
    """
    Stride-2 convolutions followed by flattened linear heads for mu and logvar.
    """
    convs: list
    mu_head: tuple
    logvar_head: tuple
    grid: int

    @property
    def z_dim(self):
        return self.mu_head[0].shape[1]

    def named_parameters(self, prefix):
        for index, (weight, bias) in enumerate(self.convs):
            yield f"{prefix}.conv{index}.weight", weight
            yield f"{prefix}.conv{index}.bias", bias
        yield f"{prefix}.mu.weight", self.mu_head[0]
        yield f"{prefix}.mu.bias", self.mu_head[1]
        yield f"{prefix}.logvar.weight", self.logvar_head[0]
        yield f"{prefix}.logvar.bias", self.logvar_head[1]


@dataclass
class DecoderParams:
    """
    Linear map to the smallest feature map, transposed convolutions back up
    to the grid and a final stride-1 convolution to the input channels.
    """
    linear: tuple
    deconvs: list
    out_conv: tuple
    base: int

    def named_parameters(self, prefix):
        yield f"{prefix}.linear.weight", self.linear[0]
        yield f"{prefix}.linear.bias", self.linear[1]
        for index, (weight, bias) in enumerate(self.deconvs):
            yield f"{prefix}.deconv{index}.weight", weight
            yield f"{prefix}.deconv{index}.bias", bias
        yield f"{prefix}.out.weight", self.out_conv[0]
        yield f"{prefix}.out.bias", self.out_conv[1]


@dataclass
class LatentGaussian:
    """
    Diagonal Gaussian posterior q(z) with mean ``mu`` and log-variance ``logvar``.
    """
    mu: Tensor
    logvar: Tensor


@dataclass
class VAEParams:
    """
    Encoder and decoder of the beta-VAE.
    """
    encoder: EncoderParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config, rng):
        """
        Build encoder and decoder for ``config.grid`` with the configured
        channel progression truncated to the grid.
        """
        dtype = config.real_dtype
        depth = encoder_depth(config.grid, len(config.vae_channels))
        channels = list(config.vae_channels[:depth])
        base = config.grid // 2 ** depth
        flat = base * base * channels[-1]

        convs = []
        c_prev = config.c_in
        for c_next in channels:
            convs.append(_conv_params(rng, c_prev, c_next, dtype))
            c_prev = c_next
        encoder = EncoderParams(
            convs=convs,
            mu_head=_linear_params(rng, flat, config.z_dim, dtype),
            logvar_head=_linear_params(rng, flat, config.z_dim, dtype),
            grid=config.grid)

        deconvs = []
        reversed_channels = channels[::-1] + [channels[0]]
        for c_from, c_to in zip(reversed_channels, reversed_channels[1:]):
            deconvs.append(_conv_params(rng, c_from, c_to, dtype))
        decoder = DecoderParams(
            linear=_linear_params(rng, config.z_dim, flat, dtype),
            deconvs=deconvs,
            out_conv=_conv_params(rng, channels[0], config.c_in, dtype),
            base=base)
        return cls(encoder, decoder)

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder")
        yield from self.decoder.named_parameters("decoder")

    def parameters(self):
        return [param for _, param in self.named_parameters()]


def _batched(x):
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    return x, False


def encode(x, p):
    """
    Posterior parameters for x[B, H, W, c] (or a single [H, W, c] field).
    """
    x, single = _batched(x)
    grid = p.grid
    if x.shape[1:3] != (grid, grid) or x.shape[-1] != p.convs[0][0].shape[2]:
        raise ShapeError(f"encoder for a {grid}x{grid} grid got shape {x.shape}")
    h = x
    for weight, bias in p.convs:
        h = gelu(conv2d(h, weight, bias, stride=2))
    h = h.reshape((h.shape[0], -1))
    mu = pointwise_linear(h, *p.mu_head)
    logvar = pointwise_linear(h, *p.logvar_head)
    if single:
        mu, logvar = mu.reshape((-1,)), logvar.reshape((-1,))
    return LatentGaussian(mu, logvar)


def reparameterize(g, eps):
    """
    z = mu + exp(logvar / 2) * eps.
    """
    if not isinstance(eps, Tensor):
        eps = Tensor(np.asarray(eps, dtype=g.mu.dtype))
    if eps.shape != g.mu.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match mu shape {g.mu.shape}")
    return g.mu + exp(g.logvar * 0.5) * eps


def decode(z, p):
    """
    Reconstruct fields [B, H, W, c] from latents z[B, z_dim] (or one [z_dim]).
    """
    single = z.ndim == 1
    if single:
        z = z.reshape((1, -1))
    h = gelu(pointwise_linear(z, *p.linear))
    channels = p.linear[0].shape[1] // (p.base * p.base)
    h = h.reshape((z.shape[0], p.base, p.base, channels))
    for weight, bias in p.deconvs:
        h = gelu(conv_transpose2d(h, weight, bias))
    out = conv2d(h, *p.out_conv, stride=1)
    if single:
        out = out.reshape(out.shape[1:])
    return out


def kl_divergence(g):
    """
    KL(q || N(0, I)) = 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) over the
    latent axis; one value per sample when the posterior is batched.
    """
    terms = square(g.mu) + exp(g.logvar) - 1.0 - g.logvar
    return reduce(terms, "sum", axis=-1) * 0.5
