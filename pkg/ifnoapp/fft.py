"""
Radix-2 Cooley-Tukey transforms on numpy arrays.

Only power-of-two lengths are supported. The forward transform is the
unnormalized DFT; the inverse divides by the transform length.
"""
import numpy as np

from ifnoapp.utils import ShapeError


def is_power_of_two(n):
    """
    True when n is a positive power of two.
    """
    return n > 0 and (n & (n - 1)) == 0


def _bit_reversal(n):
    bits = n.bit_length() - 1
    indices = np.arange(n)
    reversed_indices = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        reversed_indices = (reversed_indices << 1) | (indices & 1)
        indices = indices >> 1
    return reversed_indices


def fft_axis(x, axis, inverse=False):
    """
    Iterative decimation-in-time FFT along one axis.

    :param x: Complex array.
    :param axis: Axis to transform.
    :param inverse: Use the positive exponent and divide by the length.
    :return: Transformed array with the same shape.
    """
    n = x.shape[axis]
    if not is_power_of_two(n):
        raise ShapeError(f"FFT length {n} along axis {axis} is not a power of two")
    work = np.moveaxis(np.asarray(x), axis, -1)
    lead = work.shape[:-1]
    work = work[..., _bit_reversal(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size).astype(work.dtype)
        blocks = work.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        work = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    if inverse:
        work = work / n
    return np.moveaxis(work, -1, axis)


def _complex(x):
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return x
    if x.dtype == np.float32:
        return x.astype(np.complex64)
    return x.astype(np.complex128)


def fft2_array(x, axes=(0, 1)):
    """
    Unnormalized 2-D DFT over the two given axes.
    """
    out = fft_axis(_complex(x), axes[0])
    return fft_axis(out, axes[1])


def ifft2_array(x, axes=(0, 1)):
    """
    Inverse 2-D DFT over the two given axes, divided by the number of points.
    """
    out = fft_axis(_complex(x), axes[0], inverse=True)
    return fft_axis(out, axes[1], inverse=True)
