"""Dense tensors with a reverse-mode differentiation tape.

Tensors wrap contiguous numpy buffers (float32 for training, float64 for
gradient checking; switch globally with `precision`). Operations record one
tape entry per high-level op while a `Tape` is active, and `backward` replays
the entries in reverse order, touching each exactly once.

A tensor that requires grad but is unreachable from the loss receives a zero
gradient rather than an error.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ChannelMismatch,
    EmptyShape,
    InnerDimMismatch,
    InvalidPermutation,
    NonDeterministicFunction,
    NonFiniteInput,
    NonFiniteResult,
    NotScalar,
    ShapeMismatch,
    ShapeUnderflow,
    TapeConsumed,
)

_state = threading.local()

_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = True


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Set the element type used for newly created tensors ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported element type {dtype!r}")
    _DEFAULT_DTYPE = dt.type


@contextmanager
def precision(dtype):
    """Temporarily switch the default element type, e.g. precision('float64')."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion that runs after every operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """A dense multi-dimensional array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of executed operations; append order is topological order."""

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def reset(self) -> None:
        """Clear accumulated gradients so backward can run again."""
        self._consumed = False
        for rec in self.records:
            rec.out.grad = None
            for t in rec.inputs:
                t.grad = None


def _active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _postcheck(data: np.ndarray) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteResult("operation produced NaN or Inf")


def _finish(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, propagating requires_grad and recording on the tape."""
    _postcheck(data)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _accumulate(t: Tensor, g: Optional[np.ndarray]) -> None:
    if g is None or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of `loss` into every requires_grad tensor on the tape."""
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise TapeConsumed("backward already ran on this tape; call reset() first")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        if rec.out.grad is None:
            continue
        grads = rec.backward_fn(rec.out.grad)
        for t, g in zip(rec.inputs, grads):
            _accumulate(t, g)
    # unreachable requires_grad inputs get explicit zeros, not an error
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# construction

def tensor_create(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat value list, row-major."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise EmptyShape(f"extents must be >= 1, got {shape}")
    if not 1 <= len(shape) <= 5:
        raise ShapeMismatch(f"rank must be 1..5, got {len(shape)}")
    data = np.array(list(values), dtype=_DEFAULT_DTYPE)
    count = int(np.prod(shape))
    if data.size != count:
        raise ShapeMismatch(f"{data.size} values for shape {shape} ({count} elements)")
    return Tensor(data.reshape(shape), requires_grad=requires_grad)


def from_numpy(array: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Copy a numpy array into a tensor of the current default dtype."""
    return Tensor(np.ascontiguousarray(array, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def parameter(array: np.ndarray) -> Tensor:
    """A trainable tensor (requires_grad set)."""
    return Tensor(np.ascontiguousarray(array, dtype=_DEFAULT_DTYPE), requires_grad=True)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return tensor_create([1], [value], requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# FLOP instrumentation (multiply-add and softmax-entry counters)

class OpCounter:
    def __init__(self):
        self.matmul_macs = 0
        self.softmax_entries = 0


@contextmanager
def count_ops():
    """Count matmul multiply-adds and softmax entries executed in the block."""
    counter = OpCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _counters() -> list:
    return getattr(_state, "counters", None) or []


# ---------------------------------------------------------------------------
# operations

def permute_reshape(t: Tensor, axis_order: Sequence[int], new_shape: Sequence[int]) -> Tensor:
    """Transpose axes then reshape, materializing a contiguous result."""
    order = tuple(int(a) for a in axis_order)
    new_shape = tuple(int(s) for s in new_shape)
    if sorted(order) != list(range(t.data.ndim)):
        raise InvalidPermutation(f"{order} is not a permutation of {t.data.ndim} axes")
    if int(np.prod(new_shape)) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.shape} (transposed) into {new_shape}")
    permuted_shape = tuple(t.shape[a] for a in order)
    out_data = np.ascontiguousarray(t.data.transpose(order)).reshape(new_shape)
    inverse = tuple(np.argsort(order))

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(permuted_shape).transpose(inverse)),)

    return _finish(out_data, (t,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InnerDimMismatch(f"inner dims disagree: {a.shape} x {b.shape}")
    for counter in _counters():
        counter.matmul_macs += a.shape[0] * a.shape[1] * b.shape[1]
    out_data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return _finish(out_data, (a, b), bwd)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if m.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows needs a rank-2 tensor, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise NonFiniteInput("softmax input contains NaN or Inf")
    for counter in _counters():
        counter.softmax_entries += m.size
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return ((g - dot) * out_data,)

    return _finish(out_data, (m,), bwd)


def scaled_residual(alpha: Tensor, attended: Tensor, original: Tensor) -> Tensor:
    """alpha * attended + original, with alpha a shape-[1] parameter."""
    if alpha.size != 1:
        raise ShapeMismatch(f"alpha must be scalar, got shape {alpha.shape}")
    if attended.shape != original.shape:
        raise ShapeMismatch(f"operand shapes disagree: {attended.shape} vs {original.shape}")
    a = alpha.data.reshape(-1)[0]
    out_data = a * attended.data + original.data
    attended_data = attended.data

    def bwd(g):
        d_alpha = np.array([(g * attended_data).sum()], dtype=g.dtype)
        return d_alpha, a * g, g

    return _finish(out_data, (alpha, attended, original), bwd)


def _spatial_rank(t: Tensor, op: str) -> bool:
    """Feature maps are (C,D,H,W) or batched (N,C,D,H,W); returns True when batched."""
    if t.data.ndim == 4:
        return False
    if t.data.ndim == 5:
        return True
    raise ShapeMismatch(f"{op} needs a rank-4 or rank-5 tensor, got {t.shape}")


def conv3d_1x1(t: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Pointwise channel mixing: weights [C_out, C_in] applied at every voxel."""
    batched = _spatial_rank(t, "conv3d_1x1")
    c_axis = 1 if batched else 0
    c_in = t.shape[c_axis]
    if weights.data.ndim != 2 or weights.shape[1] != c_in:
        raise ChannelMismatch(f"weights {weights.shape} against {c_in} input channels")
    c_out = weights.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ChannelMismatch(f"bias {bias.shape} against {c_out} output channels")
    x = t.data if batched else t.data[None]
    # [N,Ci,D,H,W] -> [N,Co,D,H,W]
    out_data = np.tensordot(x, weights.data, axes=([1], [1])).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None, None]
    if not batched:
        out_data = out_data[0]
    w_data = weights.data
    inputs = (t, weights) if bias is None else (t, weights, bias)

    def bwd(g):
        gb = g if batched else g[None]
        dx = np.tensordot(gb, w_data, axes=([1], [0])).transpose(0, 4, 1, 2, 3)
        dw = np.tensordot(gb, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if not batched:
            dx = dx[0]
        dx = np.ascontiguousarray(dx)
        if bias is None:
            return dx, dw
        return dx, dw, gb.sum(axis=(0, 2, 3, 4))

    return _finish(np.ascontiguousarray(out_data), inputs, bwd)


def conv3d(t: Tensor, weights: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 3x3x3 cross-correlation; weights [C_out, C_in, 3, 3, 3]."""
    batched = _spatial_rank(t, "conv3d")
    if weights.data.ndim != 5 or weights.shape[2:] != (3, 3, 3):
        raise ShapeMismatch(f"weights must be [C_out, C_in, 3, 3, 3], got {weights.shape}")
    x = t.data if batched else t.data[None]
    n, c_in = x.shape[:2]
    if weights.shape[1] != c_in:
        raise ChannelMismatch(f"weights expect {weights.shape[1]} channels, input has {c_in}")
    c_out = weights.shape[0]
    k, s, p = 3, int(stride), int(padding)
    spatial = x.shape[2:]
    out_spatial = tuple((L + 2 * p - k) // s + 1 for L in spatial)
    if any(L < 1 for L in out_spatial):
        raise ShapeUnderflow(f"output extents {out_spatial} from input {spatial}, stride {s}, padding {p}")

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]  # [N,Ci,Do,Ho,Wo,3,3,3]
    do, ho, wo = out_spatial
    # im2col: one matrix product per conv instead of an 8-index einsum
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols = cols.reshape(n * do * ho * wo, c_in * k ** 3)
    wmat = weights.data.reshape(c_out, c_in * k ** 3)
    out_data = (cols @ wmat.T).reshape(n, do, ho, wo, c_out).transpose(0, 4, 1, 2, 3)
    out_data = np.ascontiguousarray(out_data)
    if not batched:
        out_data = out_data[0]
    pad_shape = xp.shape
    need_dx = t.requires_grad

    def bwd(g):
        gb = g if batched else g[None]
        gcols = np.ascontiguousarray(gb.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        dw = (gcols.T @ cols).reshape(c_out, c_in, k, k, k)
        if not need_dx:
            return None, dw
        dcols = (gcols @ wmat).reshape(n, do, ho, wo, c_in, k, k, k)
        dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
        dxp = np.zeros(pad_shape, dtype=gb.dtype)
        # scatter each kernel offset's contribution back onto the padded input
        for dz in range(k):
            for dy in range(k):
                for dx_ in range(k):
                    dxp[:, :, dz:dz + do * s:s, dy:dy + ho * s:s, dx_:dx_ + wo * s:s] += \
                        dcols[..., dz, dy, dx_]
        dx = dxp[:, :, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]] if p else dxp
        if not batched:
            dx = dx[0]
        return np.ascontiguousarray(dx), dw

    return _finish(out_data, (t, weights), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes disagree: {a.shape} vs {b.shape}")

    def bwd(g):
        return g, g

    return _finish(a.data + b.data, (a, b), bwd)


def add_channel_bias(t: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a (C,...) or (N,C,...) feature map."""
    batched = _spatial_rank(t, "add_channel_bias")
    c_axis = 1 if batched else 0
    if bias.data.ndim != 1 or bias.shape[0] != t.shape[c_axis]:
        raise ChannelMismatch(f"bias {bias.shape} against {t.shape[c_axis]} channels")
    expand = (None,) * c_axis + (slice(None),) + (None,) * (t.data.ndim - c_axis - 1)
    out_data = t.data + bias.data[expand]
    reduce_axes = tuple(i for i in range(t.data.ndim) if i != c_axis)

    def bwd(g):
        return g, g.sum(axis=reduce_axes)

    return _finish(out_data, (t, bias), bwd)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    out_data = np.where(mask, t.data, 0)

    def bwd(g):
        return (g * mask,)

    return _finish(out_data, (t,), bwd)


def sum_all(t: Tensor) -> Tensor:
    """Full reduction to a shape-[1] scalar, sequential accumulation order."""
    out_data = np.array([t.data.sum()], dtype=t.data.dtype)
    shape = t.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),)

    return _finish(out_data, (t,), bwd)


def select(t: Tensor, index: int) -> Tensor:
    """Slice one element off the leading axis."""
    if not 0 <= index < t.shape[0]:
        raise ShapeMismatch(f"index {index} out of range for leading extent {t.shape[0]}")
    out_data = np.ascontiguousarray(t.data[index])
    shape = t.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _finish(out_data, (t,), bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack needs identical shapes, got {sorted(shapes)}")
    out_data = np.stack([t.data for t in tensors])

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _finish(out_data, tuple(tensors), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two feature maps along the channel axis."""
    batched = _spatial_rank(a, "concat_channels")
    if _spatial_rank(b, "concat_channels") != batched:
        raise ShapeMismatch(f"rank mismatch: {a.shape} vs {b.shape}")
    axis = 1 if batched else 0
    if a.shape[:axis] + a.shape[axis + 1:] != b.shape[:axis] + b.shape[axis + 1:]:
        raise ShapeMismatch(f"non-channel extents disagree: {a.shape} vs {b.shape}")
    split = a.shape[axis]
    out_data = np.concatenate([a.data, b.data], axis=axis)

    def bwd(g):
        return np.take(g, range(split), axis=axis), np.take(g, range(split, g.shape[axis]), axis=axis)

    return _finish(out_data, (a, b), bwd)


def upsample_nearest2(t: Tensor) -> Tensor:
    """Double every spatial extent by nearest-neighbour repetition."""
    batched = _spatial_rank(t, "upsample_nearest2")
    start = 2 if batched else 1
    out_data = t.data
    for axis in range(start, start + 3):
        out_data = np.repeat(out_data, 2, axis=axis)
    lead = t.shape[:start]
    spatial = t.shape[start:]

    def bwd(g):
        reshaped = g.reshape(lead + (spatial[0], 2, spatial[1], 2, spatial[2], 2))
        return (reshaped.sum(axis=(start + 1, start + 3, start + 5)),)

    return _finish(np.ascontiguousarray(out_data), (t,), bwd)


# ---------------------------------------------------------------------------
# gradient checking

def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of f() against central differences.

    f must be a deterministic closure over `params` returning a scalar tensor,
    evaluated with float64 tensors; eps must lie in [1e-7, 1e-3]. Returns the
    worst relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in params:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 tensors; wrap in precision('float64')")

    first = f().item()
    second = f().item()
    if first != second:
        raise NonDeterministicFunction(f"f() returned {first} then {second} at the same point")

    for t in params:
        t.grad = None  # stale gradients would accumulate into the analytic pass
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.array(t.grad, copy=True) if t.grad is not None else np.zeros_like(t.data) for t in params]
    for t in params:
        t.grad = None

    worst = 0.0
    for t, a in zip(params, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f().item()
            flat[i] = original - eps
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst


def finite_difference_gradient(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a plain scalar function wrt one tensor."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = f()
        flat[i] = original - eps
        minus = f()
        flat[i] = original
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def softmax_row(values: Sequence[float]) -> list[float]:
    """Scalar-loop softmax of one row, max-subtracted; shared by naive oracles."""
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = sum(exps)
    return [e / total for e in exps]
