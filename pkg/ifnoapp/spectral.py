"""
Fourier layer: truncated spectral convolution plus a location-wise linear
path, followed by GELU.
"""
from dataclasses import dataclass

import numpy as np

from ifnoapp.tensor import (
    Tensor,
    fft2,
    gelu,
    ifft2,
    kaiming_uniform,
    mode_mix,
    pointwise_linear,
    real,
    scatter,
    zeros_parameter)
from ifnoapp.utils import ShapeError


def complex_dtype(dtype):
    """
    Complex dtype paired with a real dtype.
    """
    return np.complex64 if np.dtype(dtype) == np.float32 else np.complex128


@dataclass
class FourierLayerParams:
    """
    Parameters of one Fourier layer. ``r_low`` mixes channels for the
    non-negative low frequencies along axis 0, ``r_high`` for the highest
    ``modes`` frequencies along axis 0; both cover the lowest ``modes``
    frequencies along axis 1.
    """
    r_low: Tensor
    r_high: Tensor
    w: Tensor
    b: Tensor

    @property
    def modes(self):
        return self.r_low.shape[0]

    @property
    def channels(self):
        return self.w.shape[0]

    @classmethod
    def init(cls, channels, modes, rng, dtype=np.float64):
        """
        Random initialization: spectral weights have real and imaginary parts
        drawn from U(-s, s) with s = 1/(channels * modes); the linear path is
        Kaiming-uniform with a zero bias.
        """
        scale = 1.0 / (channels * modes)
        shape = (modes, modes, channels, channels)
        cdtype = complex_dtype(dtype)

        def spectral():
            values = rng.uniform(-scale, scale, size=shape) \
                + 1j * rng.uniform(-scale, scale, size=shape)
            return Tensor(values.astype(cdtype), requires_grad=True)

        return cls(
            r_low=spectral(),
            r_high=spectral(),
            w=kaiming_uniform(rng, (channels, channels), channels, dtype),
            b=zeros_parameter((channels,), dtype))

    @classmethod
    def zeros(cls, channels, modes, dtype=np.float64):
        """
        All-zero parameters (the layer then outputs zeros).
        """
        shape = (modes, modes, channels, channels)
        cdtype = complex_dtype(dtype)
        return cls(
            r_low=Tensor(np.zeros(shape, dtype=cdtype), requires_grad=True),
            r_high=Tensor(np.zeros(shape, dtype=cdtype), requires_grad=True),
            w=zeros_parameter((channels, channels), dtype),
            b=zeros_parameter((channels,), dtype))

    def named_parameters(self, prefix):
        """
        Yield (name, tensor) pairs with names under ``prefix``.
        """
        yield f"{prefix}.r_low", self.r_low
        yield f"{prefix}.r_high", self.r_high
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def check_mode_bound(height, width, modes):
    """
    Raise ShapeError unless 2 * modes <= height and modes <= width / 2.
    """
    if 2 * modes > height or 2 * modes > width:
        raise ShapeError(f"{modes} modes do not fit a {height}x{width} grid")


def spectral_conv(v, p):
    """
    Truncated spectral convolution of v[..., H, W, d].

    The two corner blocks of the spectrum are mixed by ``r_low`` and
    ``r_high``; every other mode is zeroed. The result is the real part of
    the inverse transform.
    """
    height, width, channels = v.shape[-3:]
    if channels != p.channels:
        raise ShapeError(f"input {v.shape} does not match {p.channels} layer channels")
    modes = p.modes
    check_mode_bound(height, width, modes)

    axes = (v.ndim - 3, v.ndim - 2)
    spectrum = fft2(v, axes)
    low = (Ellipsis, slice(0, modes), slice(0, modes), slice(None))
    high = (Ellipsis, slice(height - modes, height), slice(0, modes), slice(None))
    mixed_low = mode_mix(spectrum[low], p.r_low)
    mixed_high = mode_mix(spectrum[high], p.r_high)
    shape = spectrum.shape
    out = scatter(mixed_low, low, shape) + scatter(mixed_high, high, shape)
    return real(ifft2(out, axes))


def fourier_layer(v, p):
    """
    gelu(pointwise_linear(v, w, b) + spectral_conv(v)).
    """
    return gelu(pointwise_linear(v, p.w, p.b) + spectral_conv(v, p))
