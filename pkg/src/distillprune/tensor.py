"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records each primitive applied while it is active, in
application order.  ``Tape.backward`` replays the records once, in reverse,
accumulating gradients into ``Tensor.grad``.  Two element widths are
supported: float32 (the training default) and float64, used by the
finite-difference checks; in float64 mode every primitive also validates
that its inputs are finite.

Graph construction and backward are single-threaded per tape; independent
tapes share no state.  Reduction order inside every primitive is fixed, so
replaying the same seeded graph is bit-reproducible.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constants
_GELU_A = 0.044715


class GraphError(RuntimeError):
    """Structural misuse of the tape (non-scalar loss, double backward, ...)."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the named primitive."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_uid_counter = itertools.count()


class Tensor:
    """Dense n-dimensional array participating in a differentiable graph.

    ``grad`` is lazily allocated with the same shape as ``data`` the first
    time a gradient is accumulated.
    """

    __slots__ = ("data", "requires_grad", "grad", "uid", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, (np.ndarray, np.generic)) and arr.dtype in (np.float32, np.float64)):
            arr = arr.astype(DEFAULT_DTYPE)  # python lists/scalars default to the training width
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.uid = next(_uid_counter)
        self._tape = None

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
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars become constants of the same dtype
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return abs(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes=axes)


@dataclass
class TapeRecord:
    """One recorded primitive application: ids are Tensor.uid values."""

    kind: str
    input_ids: tuple
    output_id: int
    output: Tensor
    inputs: tuple
    backward: object  # callable(out_grad) -> None, accumulates into inputs


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, kind, inputs, output, backward):
        self.records.append(
            TapeRecord(kind, tuple(t.uid for t in inputs), output.uid, output, tuple(inputs), backward)
        )

    def backward(self, loss):
        """Accumulate d(loss)/d(tensor) into ``grad`` of every reachable tensor.

        Visits each recorded node exactly once, in reverse application order.
        The tape is consumed: a second backward without re-recording fails.
        """
        if self.consumed:
            raise GraphError("backward called twice on the same tape; re-record the graph first")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GraphError("loss was not recorded on this tape")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            rec.backward(g)
        self.records = []


_TAPE_STACK = []


def active_tape():
    if _TAPE_STACK and _TAPE_STACK[-1] is not None:
        return _TAPE_STACK[-1]
    return None


class no_grad:
    """Context manager that suspends recording on any enclosing tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def backward(loss):
    """Run backward on the tape that recorded ``loss``."""
    if loss._tape is None:
        raise GraphError("loss has no recorded history (was it built under a Tape?)")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive plumbing


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _check_dtypes(kind, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{kind}: mixed element widths {sorted(d.name for d in dtypes)}; no implicit promotion")


def _check_finite_inputs(kind, tensors):
    # float64 is the gradient-check mode; it pays for strict input validation
    for t in tensors:
        if t.data.dtype == np.float64 and not np.all(np.isfinite(t.data)):
            raise NumericError(f"{kind}: non-finite input in 64-bit test mode")


def _make(kind, out_data, inputs, backward_fn):
    _check_finite_inputs(kind, inputs)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, out, backward_fn)
        out._tape = tape
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to ``shape`` (trailing alignment)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(kind, a, b, forward, grad_a, grad_b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(kind, a, b)
    try:
        out_data = forward(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from e

    def bwd(g):
        _accumulate(a, _reduce_to(grad_a(g, a.data, b.data), a.shape))
        _accumulate(b, _reduce_to(grad_b(g, a.data, b.data), b.shape))

    return _make(kind, out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        "div", a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def neg(x):
    def bwd(g):
        _accumulate(x, -g)

    return _make("neg", -x.data, (x,), bwd)


def abs(x):  # noqa: A001 - mirrors numpy's own shadowing
    sign = np.sign(x.data)

    def bwd(g):
        _accumulate(x, g * sign)

    return _make("abs", np.abs(x.data), (x,), bwd)


def exp(x):
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return _make("exp", out_data, (x,), bwd)


def log(x):
    def bwd(g):
        _accumulate(x, g / x.data)

    return _make("log", np.log(x.data), (x,), bwd)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * 0.5 / out_data)

    return _make("sqrt", out_data, (x,), bwd)


def _sigmoid_data(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    out_data = _sigmoid_data(x.data)

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make("sigmoid", out_data, (x,), bwd)


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        _accumulate(x, g * local)

    return _make("gelu", out_data, (x,), bwd)


def clamp(x, lo, hi):
    """Clamp to [lo, hi]; subgradient is 1 strictly inside and 0 elsewhere."""
    if not lo < hi:
        raise ValueError(f"clamp: lo={lo} must be < hi={hi}")
    interior = (x.data > lo) & (x.data < hi)

    def bwd(g):
        _accumulate(x, g * interior)

    return _make("clamp", np.clip(x.data, lo, hi), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    axes = _axis_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make("sum", out_data, (x,), bwd)


def mean(x, axis=None, keepdims=False):
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)

    return _make("mean", out_data, (x,), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make("softmax", out_data, (x,), bwd)


def layer_norm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean, unit variance along ``axis`` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        _accumulate(x, inv * (g - gm - xhat * gx))

    return _make("layer_norm", xhat, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accumulate(a, _reduce_to(ga, a.shape))
        _accumulate(b, _reduce_to(gb, b.shape))

    return _make("matmul", out_data, (a, b), bwd)


def conv1d(x, w, stride=1):
    """Valid (unpadded) 1-D convolution along the last axis.

    x: (C_in, T) or (B, C_in, T); w: (C_out, C_in, K).  Output length is
    floor((T - K) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    single = x.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or w.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: shapes {x.shape} and {w.shape} do not conform")
    k = w.shape[2]
    if xd.shape[2] < k:
        raise ShapeError(f"conv1d: input length {xd.shape[2]} shorter than kernel {k}")
    win = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]  # (B, C_in, T_out, K)
    out_data = np.einsum("bctk,ock->bot", win, w.data)
    t_out = out_data.shape[2]

    def bwd(g):
        if single:
            g = g[None]
        if w.requires_grad:
            _accumulate(w, np.einsum("bctk,bot->ock", win, g))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for j in range(k):
                # each kernel tap scatters into a strided slice of the input
                gx[:, :, j : j + stride * t_out : stride] += np.einsum("bot,oc->bct", g, w.data[:, :, j])
            _accumulate(x, gx[0] if single else gx)

    return _make("conv1d", out_data[0] if single else out_data, (x, w), bwd)


def transpose(x, axes=None):
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(perm)

    def bwd(g):
        _accumulate(x, g.transpose(inverse))

    return _make("transpose", x.data.transpose(perm), (x,), bwd)


def reshape(x, shape):
    old_shape = x.shape
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old_shape} as {shape}") from e

    def bwd(g):
        _accumulate(x, g.reshape(old_shape))

    return _make("reshape", out_data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    _check_dtypes("concat", *tensors)
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}") from e
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, np.moveaxis(moved[lo:hi], 0, axis))

    return _make("concat", out_data, tuple(tensors), bwd)


def slice_(x, key):
    """Basic (integer/slice) indexing; gradient scatters into zeros."""
    out_data = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        _accumulate(x, gx)

    return _make("slice", out_data, (x,), bwd)


def broadcast_to(x, shape):
    try:
        out_data = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from e

    def bwd(g):
        _accumulate(x, _reduce_to(g, x.shape))

    return _make("broadcast", np.ascontiguousarray(out_data), (x,), bwd)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv1d": conv1d,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "clamp": clamp,
    "sum": sum,
    "mean": mean,
    "abs": abs,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "broadcast": broadcast_to,
}


def apply_primitive(kind, *inputs, **params):
    """Apply a primitive by name; the single dispatch point used by tests."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_err: float
    max_rel_err: float
    nonfinite: bool

    def ok(self, tol):
        return not self.nonfinite and self.max_rel_err < tol


def check_gradients(f, x, eps=1e-5, rel_floor=1e-6):
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``f`` must be deterministic across calls (freeze any sampling noise).
    Relative error per element is |a - n| / max(|a|, |n|, rel_floor).
    """
    with Tape() as tape:
        loss = f(x)
    if loss.size != 1:
        raise GraphError(f"check_gradients needs a scalar-valued f, got shape {loss.shape}")
    tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(x).item()
            flat[i] = orig - eps
            f_minus = f(x).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    numeric = numeric.reshape(x.shape).astype(x.data.dtype)

    diff = np.abs(analytic.astype(np.float64) - numeric.astype(np.float64))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
    nonfinite = not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric)))
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric,
        max_abs_err=float(diff.max()) if diff.size else 0.0,
        max_rel_err=float((diff / denom).max()) if diff.size else 0.0,
        nonfinite=nonfinite,
    )
