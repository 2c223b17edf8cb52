"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. While a Tape is active, every operation with at
least one grad-enabled operand is recorded on it together with a local adjoint
rule, and Tape.backward visits the records once, in reverse order. Outside a
tape the same operations run without recording (inference mode).

Broadcast rule: element-wise operands follow numpy broadcasting, i.e. shapes
are right-aligned and size-1 axes stretch. Adjoints are summed back over the
stretched axes, so every gradient has the shape of its operand.

Complex gradients are reported as dL/dRe + i dL/dIm, which is the gradient of
the interleaved (real, imaginary) view of the parameter.
"""
import numpy as np

from ifnoapp.constants import GRADCHECK_FLOOR, SOFTPLUS_FLOOR, SOFTPLUS_LINEAR_CUTOFF
from ifnoapp.fft import fft2_array, ifft2_array, is_power_of_two
from ifnoapp.utils import AutodiffError, ShapeError

_TAPES = []

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_K = 0.044715


class _Entry:
    """
    One recorded operation: operands, output and the local adjoint rule.
    """
    __slots__ = ("inputs", "output", "adjoint")

    def __init__(self, inputs, output, adjoint):
        self.inputs = inputs
        self.output = output
        self.adjoint = adjoint


class Tape:
    """
    Ordered record of operations. Use as a context manager; tapes nest and
    the innermost one records.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, inputs, output, adjoint):
        """
        Append an operation. Operands are always recorded before outputs
        that depend on them, so the list is topologically ordered.
        """
        output.tape_node = (self, len(self.entries))
        self.entries.append(_Entry(inputs, output, adjoint))

    def _owns(self, tensor):
        return tensor.tape_node is not None and tensor.tape_node[0] is self

    def backward(self, loss):
        """
        Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-enabled
        leaf used on this tape. Leaves the loss does not reach get zeros.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self._owns(loss):
            raise AutodiffError("loss was not recorded on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for operand, g_in in zip(entry.inputs, entry.adjoint(g)):
                if g_in is None or not operand.requires_grad:
                    continue
                g_in = _unbroadcast(g_in, operand)
                key = id(operand)
                if self._owns(operand):
                    grads[key] = g_in if key not in grads else grads[key] + g_in
                elif key in leaves:
                    leaves[key] = (operand, leaves[key][1] + g_in)
                else:
                    leaves[key] = (operand, g_in)

        for entry in self.entries:
            for operand in entry.inputs:
                if operand.requires_grad and not self._owns(operand) \
                        and id(operand) not in leaves:
                    leaves[id(operand)] = (operand, np.zeros_like(operand.data))

        for leaf, g in leaves.values():
            g = np.array(g, dtype=leaf.data.dtype)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape():
    """
    The innermost active tape, or None in inference mode.
    """
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g, operand):
    shape = operand.shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if np.iscomplexobj(g) and not np.iscomplexobj(operand.data):
        g = g.real
    return g


class Tensor:
    """
    Dense real or complex array with optional gradient tape participation.
    """
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.inexact):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self):
        return np.iscomplexobj(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        """
        The underlying array.
        """
        return self.data

    def item(self):
        """
        The value of a single-element real tensor as a Python float.
        """
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(np.real(self.data.reshape(-1)[0]))

    def zero_grad(self):
        """
        Reset the gradient to zeros of the tensor's shape.
        """
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """
        Run backward on the tape this scalar was recorded on.
        """
        if self.tape_node is None:
            raise AutodiffError("tensor is not on an active tape")
        self.tape_node[0].backward(self)

    def __add__(self, other):
        return ew_op(self, other, "add")

    def __radd__(self, other):
        return ew_op(other, self, "add")

    def __sub__(self, other):
        return ew_op(self, other, "sub")

    def __rsub__(self, other):
        return ew_op(other, self, "sub")

    def __mul__(self, other):
        return ew_op(self, other, "mul")

    def __rmul__(self, other):
        return ew_op(other, self, "mul")

    def __truediv__(self, other):
        return ew_op(self, other, "div")

    def __rtruediv__(self, other):
        return ew_op(other, self, "div")

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None):
        return reduce(self, "sum", axis)

    def mean(self, axis=None):
        return reduce(self, "mean", axis)


def as_tensor(value, like=None):
    """
    Wrap a constant as a non-differentiable tensor. Python scalars take the
    real dtype of ``like``.
    """
    if isinstance(value, Tensor):
        return value
    dtype = None
    if like is not None and np.isscalar(value) and not np.iscomplexobj(value):
        dtype = like.data.real.dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _record(data, inputs, adjoint):
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    tape = active_tape()
    if requires_grad and tape is not None:
        tape.record(inputs, out, adjoint)
    return out


def ew_op(a, b, kind):
    """
    Element-wise add, sub, mul or div under the module broadcast rule.
    Division propagates infinities and NaNs instead of masking them.
    """
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as error:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from error

    if kind == "add":
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "sub":
        return _record(a.data - b.data, (a, b), lambda g: (g, -g))
    if kind == "mul":
        return _record(a.data * b.data, (a, b),
                       lambda g: (g * np.conj(b.data), g * np.conj(a.data)))
    if kind == "div":
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            data = a.data / b.data

        def adjoint(g):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                g_a = g / np.conj(b.data)
                g_b = -g_a * np.conj(data)
            return g_a, g_b
        return _record(data, (a, b), adjoint)
    raise ValueError(f"unknown element-wise kind '{kind}'")


def exp(x):
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * np.conj(out),))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _record(out, (x,), lambda g: (g / np.conj(x.data),))


def square(x):
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * np.conj(x.data),))


def gelu(x):
    """
    Tanh-approximation GELU.
    """
    v = x.data
    inner = GELU_C * (v + GELU_K * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def adjoint(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_K * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)
    return _record(out, (x,), adjoint)


def softplus_tau(x, tau):
    """
    S(x) = log(1 + exp(tau x)) / tau, clamped below at the softplus floor.
    For tau x above the linear cutoff the asymptotic form x + exp(-tau x)/tau
    is used.
    """
    if tau <= 0:
        raise ValueError(f"softplus tau must be positive, got {tau}")
    v = x.data
    z = tau * v
    linear = z > SOFTPLUS_LINEAR_CUTOFF
    out = np.empty_like(v)
    out[linear] = v[linear] + np.exp(-z[linear]) / tau
    out[~linear] = np.log1p(np.exp(z[~linear])) / tau
    clamped = out < SOFTPLUS_FLOOR
    out = np.maximum(out, SOFTPLUS_FLOOR).astype(v.dtype)

    def adjoint(g):
        sigmoid = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * sigmoid * (~clamped),)
    return _record(out, (x,), adjoint)


def real(x):
    """
    Real part of a complex tensor.
    """
    return _record(np.ascontiguousarray(x.data.real), (x,), lambda g: (g.astype(x.dtype),))


def _check_fft_axes(x, axes):
    for axis in axes:
        if not is_power_of_two(x.shape[axis]):
            raise ShapeError(f"FFT needs power-of-two spatial sizes, got shape {x.shape}")


def fft2(x, axes=(0, 1)):
    """
    Unnormalized forward 2-D DFT over ``axes``; the adjoint is ifft2 scaled
    by the number of transformed points.
    """
    _check_fft_axes(x, axes)
    points = x.shape[axes[0]] * x.shape[axes[1]]
    out = fft2_array(x.data, axes)
    return _record(out, (x,), lambda g: (points * ifft2_array(g, axes),))


def ifft2(x, axes=(0, 1)):
    """
    Inverse 2-D DFT over ``axes`` divided by the number of points.
    """
    _check_fft_axes(x, axes)
    points = x.shape[axes[0]] * x.shape[axes[1]]
    out = ifft2_array(x.data, axes)
    return _record(out, (x,), lambda g: (fft2_array(g, axes) / points,))


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def reduce(x, kind, axis=None):
    """
    Sum or mean over ``axis`` (all axes when None).
    """
    if kind == "sum":
        out = np.sum(x.data, axis=axis)
        return _record(out, (x,), lambda g: (_expand(g, x.shape, axis),))
    if kind == "mean":
        out = np.mean(x.data, axis=axis)
        count = x.size // max(np.size(out), 1)
        return _record(out, (x,), lambda g: (_expand(g, x.shape, axis) / count,))
    raise ValueError(f"unknown reduction '{kind}'")


def frob_norm(x, axis=None):
    """
    Frobenius norm over ``axis`` (all axes when None). A zero norm has a
    zero adjoint.
    """
    out = np.sqrt(np.sum(np.abs(x.data) ** 2, axis=axis))

    def adjoint(g):
        norm = _expand(out, x.shape, axis)
        g = _expand(g, x.shape, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * x.data / safe, 0.0),)
    return _record(out, (x,), adjoint)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index):
    out = x.data[index]

    def adjoint(g):
        full = np.zeros(x.shape, dtype=np.result_type(g.dtype, x.dtype))
        full[index] = g
        return (full,)
    return _record(np.ascontiguousarray(out), (x,), adjoint)


def scatter(x, index, shape):
    """
    Place ``x`` at ``index`` of a zero tensor of ``shape``.
    """
    out = np.zeros(shape, dtype=x.dtype)
    out[index] = x.data
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g[index]),))


def concat(tensors, axis=-1):
    """
    Concatenate tensors along ``axis``.
    """
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def pointwise_linear(v, weight, bias=None):
    """
    Location-wise affine map: out[..., :] = v[..., :] @ weight + bias.
    """
    c_in, c_out = weight.shape
    if v.shape[-1] != c_in:
        raise ShapeError(f"input channels {v.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = v.data @ weight.data
    inputs = (v, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (v, weight, bias)

    def adjoint(g):
        flat_v = v.data.reshape(-1, c_in)
        flat_g = g.reshape(-1, c_out)
        grads = [g @ np.conj(weight.data).T, np.conj(flat_v).T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)
    return _record(out, inputs, adjoint)


def mode_mix(v, weights):
    """
    Per-mode channel mixing: out[..., x, y, o] = sum_c v[..., x, y, c] w[x, y, c, o].
    """
    if v.shape[-3:] != weights.shape[:3]:
        raise ShapeError(f"modes {v.shape} do not match weights {weights.shape}")
    out = np.einsum("...xyc,xyco->...xyo", v.data, weights.data)

    def adjoint(g):
        modes = v.shape[-3:]
        flat_v = v.data.reshape((-1,) + modes)
        flat_g = g.reshape((-1,) + g.shape[-3:])
        g_v = np.einsum("...xyo,xyco->...xyc", g, np.conj(weights.data))
        g_w = np.einsum("bxyc,bxyo->xyco", np.conj(flat_v), flat_g)
        return g_v, g_w
    return _record(out, (v, weights), adjoint)


def _windows(size, count, stride, offset):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d(x, weight, bias=None, stride=1, padding=1):
    """
    2-D convolution on channels-last input x[B, H, W, C] with weight[k, k, C, O].
    """
    k, _, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"input channels {x.shape} do not match kernel {weight.shape}")
    batch, height, width, _ = x.shape
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((batch, out_h, out_w, c_out), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            rows = _windows(height, out_h, stride, i)
            cols = _windows(width, out_w, stride, j)
            out += padded[:, rows, cols, :] @ weight.data[i, j]
    inputs = (x, weight)
    if bias is not None:
        out += bias.data
        inputs = (x, weight, bias)

    def adjoint(g):
        g_padded = np.zeros(padded.shape, dtype=g.dtype)
        g_weight = np.zeros(weight.shape, dtype=g.dtype)
        flat_g = g.reshape(-1, c_out)
        for i in range(k):
            for j in range(k):
                rows = _windows(height, out_h, stride, i)
                cols = _windows(width, out_w, stride, j)
                patch = padded[:, rows, cols, :]
                g_padded[:, rows, cols, :] += g @ weight.data[i, j].T
                g_weight[i, j] = patch.reshape(-1, c_in).T @ flat_g
        g_x = g_padded[:, padding:padding + height, padding:padding + width, :]
        grads = [g_x, g_weight]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)
    return _record(out, inputs, adjoint)


def conv_transpose2d(x, weight, bias=None):
    """
    Stride-2 transposed convolution (kernel 3, padding 1, output padding 1)
    on x[B, H, W, C] with weight[3, 3, C, O]; doubles the spatial size.
    """
    k, _, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"input channels {x.shape} do not match kernel {weight.shape}")
    batch, height, width, _ = x.shape
    stride, padding = 2, 1
    full = np.zeros((batch, stride * height + k - 1, stride * width + k - 1, c_out),
                    dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            rows = _windows(full.shape[1], height, stride, i)
            cols = _windows(full.shape[2], width, stride, j)
            full[:, rows, cols, :] += x.data @ weight.data[i, j]
    out = full[:, padding:padding + stride * height, padding:padding + stride * width, :]
    out = np.ascontiguousarray(out)
    inputs = (x, weight)
    if bias is not None:
        out += bias.data
        inputs = (x, weight, bias)

    def adjoint(g):
        g_full = np.zeros(full.shape, dtype=g.dtype)
        g_full[:, padding:padding + stride * height, padding:padding + stride * width, :] = g
        g_x = np.zeros(x.shape, dtype=g.dtype)
        g_weight = np.zeros(weight.shape, dtype=g.dtype)
        flat_x = x.data.reshape(-1, c_in)
        for i in range(k):
            for j in range(k):
                rows = _windows(full.shape[1], height, stride, i)
                cols = _windows(full.shape[2], width, stride, j)
                window = g_full[:, rows, cols, :]
                g_x += window @ weight.data[i, j].T
                g_weight[i, j] = flat_x.T @ window.reshape(-1, c_out)
        grads = [g_x, g_weight]
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return tuple(grads)
    return _record(out, inputs, adjoint)


def _real_view(tensor):
    if tensor.is_complex:
        return tensor.data.view(tensor.data.real.dtype).reshape(-1)
    return tensor.data.reshape(-1)


def grad_check_params(loss_fn, params, h=1e-5, floor=GRADCHECK_FLOOR,
                      max_coords=None, seed=0):
    """
    Compare tape gradients of ``loss_fn()`` against central differences.

    Every parameter is perturbed in place, one real coordinate at a time
    (complex entries count as two coordinates). When ``max_coords`` is given,
    a seeded random subset of that many coordinates per parameter is checked.

    :return: The worst relative discrepancy, with ``floor`` as the smallest
        denominator.
    """
    for param in params:
        param.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in params:
        if param.grad is None:
            param.zero_grad()
        values = _real_view(param)
        analytic = _real_view(Tensor(param.grad))
        coords = np.arange(values.size)
        if max_coords is not None and values.size > max_coords:
            coords = np.sort(rng.choice(values.size, size=max_coords, replace=False))
        for coord in coords:
            original = values[coord]
            values[coord] = original + h
            plus = loss_fn().item()
            values[coord] = original - h
            minus = loss_fn().item()
            values[coord] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = float(analytic[coord])
            error = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
            worst = max(worst, error)
    return worst


def grad_check(f, x, h=1e-5, floor=GRADCHECK_FLOOR):
    """
    Worst relative error between the tape gradient of ``f(x)`` and central
    differences (f(x + h e) - f(x - h e)) / 2h over every coordinate of x.
    """
    return grad_check_params(lambda: f(x), [x], h=h, floor=floor)


def kaiming_uniform(rng, shape, fan_in, dtype=np.float64, name=None):
    """
    Grad-enabled parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    the Kaiming-uniform default of torch.nn.Linear.
    """
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_parameter(shape, dtype=np.float64, name=None):
    """
    Grad-enabled parameter filled with zeros.
    """
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
