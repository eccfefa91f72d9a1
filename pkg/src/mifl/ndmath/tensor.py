"""Dense tensors with reverse-mode automatic differentiation.

Tensors are immutable wrappers around NumPy arrays.  Operations are
recorded onto the innermost active :class:`GradientTape` (a per-thread
stack, so independent tapes on separate threads never interact), and
``tape.gradient(loss, sources)`` replays the record in reverse.

Weights and activations default to float32; reduction ops (sum, mean,
logsumexp, cross-entropy) accumulate in float64 before casting back,
which keeps the log-partition terms of the MI losses stable.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "tape_stack", None)
    if stack is None:
        stack = []
        _LOCAL.tape_stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float32 (default) or float64 values."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        """Adopt a freshly computed array without copying."""
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        return t

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradientTape:
    """Ordered record of primitive ops for one reverse pass.

    Use as a context manager; every op executed while the tape is the
    innermost active one gets recorded in execution (topological) order.
    """

    def __init__(self):
        self._ops = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, output, inputs, backward_fn):
        self._ops.append((output, inputs, backward_fn))

    def gradient(self, loss, sources):
        """Gradients of a scalar loss w.r.t. each source tensor.

        Sources the loss does not depend on receive zero gradients of the
        matching shape.  Gradients are returned as NumPy arrays.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ShapeError(
                f"backward: loss must be a scalar Tensor, got shape "
                f"{getattr(loss, 'shape', type(loss).__name__)}"
            )
        grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for output, inputs, backward_fn in reversed(self._ops):
            g = grads.get(id(output))
            if g is None:
                continue
            in_grads = backward_fn(g)
            for tensor, ig in zip(inputs, in_grads):
                if ig is None:
                    continue
                prev = grads.get(id(tensor))
                grads[id(tensor)] = ig if prev is None else prev + ig
        return [
            grads.get(id(s), np.zeros(s.shape, dtype=s.dtype)) for s in sources
        ]


def backward(tape, loss, sources):
    """Module-level alias for :meth:`GradientTape.gradient`."""
    return tape.gradient(loss, sources)


def _record(output, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None:
        tape._record(output, inputs, backward_fn)
    return output


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.dtype if like is not None else None)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    out = Tensor._wrap(a.data + b.data)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward_fn)


def sub(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    out = Tensor._wrap(a.data - b.data)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward_fn)


def mul(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    out = Tensor._wrap(a.data * b.data)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward_fn)


def neg(a):
    out = Tensor._wrap(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a):
    out_data = np.exp(a.data)
    out = Tensor._wrap(out_data)
    return _record(out, (a,), lambda g: (g * out_data,))


def log(a):
    out = Tensor._wrap(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def relu(a):
    out = Tensor._wrap(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    if not lo <= hi:
        raise ValueError(f"clamp: lo={lo} must not exceed hi={hi}")
    out = Tensor._wrap(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    out = Tensor._wrap(np.logaddexp(0.0, a.data).astype(a.dtype))
    return _record(out, (a,), lambda g: (g * _sigmoid(a.data),))


# ---------------------------------------------------------------------------
# Linear algebra / structure ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward_fn)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a, shape):
    out = Tensor._wrap(np.reshape(a.data, shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate: need at least one tensor")
    try:
        out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as err:
        raise ShapeError(
            f"concatenate: shapes {[t.shape for t in tensors]} do not align: {err}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), backward_fn)


def index_select(a, axis, indices):
    indices = np.asarray(indices)
    if indices.ndim != 1 or not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("index_select: indices must be a 1-D integer array")
    out = Tensor._wrap(np.take(a.data, indices, axis=axis))

    def backward_fn(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record(out, (a,), backward_fn)


def detach(a):
    """A new leaf with the same values; gradients never flow past it."""
    return Tensor._wrap(a.data)


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def sum_(a, axis=None):
    out = Tensor._wrap(np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return _record(out, (a,), backward_fn)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    out = Tensor._wrap(np.mean(a.data, axis=axis, dtype=np.float64).astype(a.dtype))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).astype(a.dtype),)

    return _record(out, (a,), backward_fn)


def logsumexp(a, axis=None):
    """log(sum(exp(x))) along an axis (or over all entries), max-shifted."""
    x64 = a.data.astype(np.float64)
    xmax = np.max(x64, axis=axis, keepdims=True)
    ex = np.exp(x64 - xmax)
    total = np.sum(ex, axis=axis, keepdims=True)
    out64 = xmax + np.log(total)
    soft = (ex / total).astype(a.dtype)
    if axis is None:
        out = Tensor._wrap(out64.reshape(()).astype(a.dtype))
    else:
        out = Tensor._wrap(np.squeeze(out64, axis=axis).astype(a.dtype))

    def backward_fn(g):
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return _record(out, (a,), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class over a batch.

    logits: (B, K) Tensor; labels: length-B integer array with values in
    [0, K).  Out-of-range labels are rejected.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match "
            f"batch size {logits.shape[0]}"
        )
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"softmax_cross_entropy: labels must lie in [0, {n_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    x64 = logits.data.astype(np.float64)
    xmax = x64.max(axis=1, keepdims=True)
    ex = np.exp(x64 - xmax)
    lse = xmax[:, 0] + np.log(ex.sum(axis=1))
    batch = np.arange(labels.shape[0])
    nll = lse - x64[batch, labels]
    out = Tensor._wrap(np.asarray(nll.mean(), dtype=logits.dtype))
    soft = ex / ex.sum(axis=1, keepdims=True)

    def backward_fn(g):
        gl = soft.copy()
        gl[batch, labels] -= 1.0
        gl *= float(g) / labels.shape[0]
        return (gl.astype(logits.dtype),)

    return _record(out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# Conv / pool (kernels module carries the hot loops)
# ---------------------------------------------------------------------------

def conv2d(x, w, b):
    """Valid-padding stride-1 2-D convolution with per-filter bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match kernel channels {w.shape}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match filters {w.shape}")
    if x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    out = Tensor._wrap(kernels.conv2d_forward(x.data, w.data, b.data))

    def backward_fn(g):
        return kernels.conv2d_backward(x.data, w.data, g)

    return _record(out, (x, w, b), backward_fn)


def maxpool2d(x, kernel=2, stride=2):
    """Max pooling over kernel x kernel windows; trailing rows/cols that do
    not fill a window are dropped (valid pooling)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {kernel}x{kernel}")
    out_data, argmax = kernels.maxpool2d_forward(x.data, kernel, stride)
    out = Tensor._wrap(out_data)

    def backward_fn(g):
        return (kernels.maxpool2d_backward(argmax, g, x.shape),)

    return _record(out, (x,), backward_fn)
