import numpy as np
import pytest

from ifnoapp.spectral import (
    FourierLayerParams,
    check_mode_bound,
    fourier_layer,
    spectral_conv)
from ifnoapp.tensor import Tape, Tensor, grad_check_params, reduce, square
from ifnoapp.utils import ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _circular_convolution(kernel, field):
    n = field.shape[0]
    out = np.zeros_like(field)
    for i in range(n):
        for j in range(n):
            for p in range(n):
                for q in range(n):
                    out[i, j] += kernel[p, q] * field[(i - p) % n, (j - q) % n]
    return out


def test_zero_parameters_give_zero_output(rng):
    params = FourierLayerParams.zeros(channels=3, modes=2)
    v = Tensor(rng.standard_normal((8, 8, 3)))
    assert np.all(spectral_conv(v, params).data == 0.0)
    assert np.all(fourier_layer(v, params).data == 0.0)


def test_output_is_real_with_input_shape(rng):
    params = FourierLayerParams.init(channels=3, modes=2, rng=rng)
    out = fourier_layer(Tensor(rng.standard_normal((2, 8, 16, 3))), params)
    assert out.shape == (2, 8, 16, 3)
    assert not out.is_complex


def test_init_scales(rng):
    params = FourierLayerParams.init(channels=4, modes=3, rng=rng)
    bound = 1.0 / 12.0
    for weights in (params.r_low, params.r_high):
        assert weights.shape == (3, 3, 4, 4)
        assert weights.is_complex
        assert np.all(np.abs(weights.data.real) <= bound)
        assert np.all(np.abs(weights.data.imag) <= bound)
    assert np.all(params.b.data == 0.0)


def test_mode_bound():
    check_mode_bound(8, 8, 4)
    with pytest.raises(ShapeError):
        check_mode_bound(8, 8, 5)
    with pytest.raises(ShapeError):
        check_mode_bound(16, 4, 3)


def test_spectral_conv_rejects_bad_shapes(rng):
    params = FourierLayerParams.init(channels=2, modes=4, rng=rng)
    with pytest.raises(ShapeError):
        spectral_conv(Tensor(np.zeros((8, 8, 3))), params)
    with pytest.raises(ShapeError):
        spectral_conv(Tensor(np.zeros((4, 8, 2))), params)
    with pytest.raises(ShapeError):
        spectral_conv(Tensor(np.zeros((12, 12, 2))), params)


def test_truncated_modes_are_removed(rng):
    """
    A field made only of the highest row frequency lies outside both
    retained corner blocks.
    """
    params = FourierLayerParams.init(channels=1, modes=2, rng=rng)
    rows = np.cos(np.pi * np.arange(8))[:, None] * np.ones((1, 8))
    out = spectral_conv(Tensor(rows[..., None]), params)
    assert np.max(np.abs(out.data)) < 1e-12


def test_full_modes_match_circular_convolution(rng):
    """
    With every retained mode, the spectral convolution of a real field is a
    circular convolution whose kernel has no energy in the Nyquist column.
    Columns 1 .. m-1 carry twice the kernel spectrum because the real part
    folds in the conjugate half.
    """
    n, modes = 8, 4
    spectrum = np.fft.fft2(rng.standard_normal((n, n)))
    spectrum[:, n // 2] = 0.0
    kernel = np.real(np.fft.ifft2(spectrum))
    field = rng.standard_normal((n, n))

    factor = np.ones(modes)
    factor[1:] = 2.0
    weights = spectrum[:, :modes] * factor
    params = FourierLayerParams.zeros(channels=1, modes=modes)
    params.r_low.data = np.ascontiguousarray(weights[:modes, :, None, None])
    params.r_high.data = np.ascontiguousarray(weights[n - modes:, :, None, None])

    out = spectral_conv(Tensor(field[..., None]), params).data[..., 0]
    assert np.max(np.abs(out - _circular_convolution(kernel, field))) < 1e-9


def test_batch_axis_matches_single_samples(rng):
    params = FourierLayerParams.init(channels=2, modes=2, rng=rng)
    batch = rng.standard_normal((3, 8, 8, 2))
    stacked = fourier_layer(Tensor(batch), params).data
    for k in range(3):
        assert np.allclose(stacked[k], fourier_layer(Tensor(batch[k]), params).data)


@pytest.mark.parametrize("layer", [spectral_conv, fourier_layer])
def test_gradients(rng, layer):
    params = FourierLayerParams.init(channels=2, modes=2, rng=rng)
    v = Tensor(rng.standard_normal((8, 8, 2)), requires_grad=True)
    tensors = [v, params.r_low, params.r_high, params.w, params.b]

    def loss():
        return reduce(square(layer(v, params)), "sum")
    assert grad_check_params(loss, tensors, max_coords=24, floor=1e-4) < 1e-4


def test_spectral_conv_is_linear(rng):
    params = FourierLayerParams.init(channels=2, modes=3, rng=rng)
    x, y = rng.standard_normal((2, 8, 8, 2))
    combined = spectral_conv(Tensor(1.5 * x - 0.25 * y), params).data
    separate = 1.5 * spectral_conv(Tensor(x), params).data - 0.25 * spectral_conv(Tensor(y), params).data
    assert np.allclose(combined, separate, atol=1e-12)


@pytest.mark.parametrize("shift", [(1, 0), (0, 3), (5, 2)])
def test_spectral_conv_commutes_with_circular_shifts(rng, shift):
    params = FourierLayerParams.init(channels=2, modes=3, rng=rng)
    field = rng.standard_normal((8, 8, 2))
    shifted = spectral_conv(Tensor(np.roll(field, shift, axis=(0, 1))), params).data
    expected = np.roll(spectral_conv(Tensor(field), params).data, shift, axis=(0, 1))
    assert np.allclose(shifted, expected, atol=1e-12)


def test_recording_does_not_change_values(rng):
    params = FourierLayerParams.init(channels=2, modes=2, rng=rng)
    field = rng.standard_normal((2, 8, 8, 2))
    plain = fourier_layer(Tensor(field), params).data
    with Tape():
        recorded = fourier_layer(Tensor(field, requires_grad=True), params).data
    assert np.array_equal(plain, recorded)
