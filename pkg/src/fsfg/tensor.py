"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded whenever one of their inputs requires a gradient. Outside a tape
every operation is a plain numpy computation, which is how evaluation runs.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class TensorError(Exception):
    """Base class for tensor-core failures."""


class DimensionError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class DegenerateVectorError(TensorError, ValueError):
    """A vector's norm fell below the cosine-similarity floor."""


class BackwardError(TensorError, RuntimeError):
    """Contract violation in :func:`backward` (non-scalar loss, reuse, accumulation)."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Record:
    out: "Tensor"
    parents: tuple
    backward_fn: Callable


class Tape:
    """Ordered log of differentiable operations; one backward pass per tape."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()
        self.consumed = False


class no_tape:
    """Suspend recording (used for finite differences and evaluation)."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        self._saved = _state.stack
        _state.stack = []
        return self

    def __exit__(self, *exc):
        _state.stack = self._saved
        return False


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check_finite(arr, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape = None   # weakref to the recording Tape, if any

    # -- basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        frozen = getattr(_state, "frozen", None)
        if frozen is not None:
            return Tensor(frozen.value(self.data), requires_grad=False)
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = weakref.ref(tape)
        tape.records.append(_Record(out, tuple(parents), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("division by zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) / float(count)


def tmax(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    xd = x.data
    if axis is None:
        flat = int(np.argmax(xd))

        def bw(g):
            full = np.zeros(xd.size)
            full[flat] = float(g.reshape(-1)[0])
            return (full.reshape(xd.shape),)

        out = xd.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * xd.ndim)
        return _make(out, (x,), bw, "max")

    axis = axis % xd.ndim
    arg = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, arg, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(xd)
        np.put_along_axis(full, arg, g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), bw, "max")


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` using the max-shift identity."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_sum_exp of an empty vector")
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (x,), bw, "log_sum_exp")


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(square(x), axis, keepdims))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors; raises on near-zero norms."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_similarity expects equal 1-D shapes, got {a.shape}, {b.shape}")
    na, nb = l2_norm(a), l2_norm(b)
    if na.data <= EPS_NORM or nb.data <= EPS_NORM:
        raise DegenerateVectorError("vector norm below 1e-12")
    return dot(a, b) / (na * nb)


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each row of a matrix by its L2 norm."""
    norms = l2_norm(x, axis=1, keepdims=True)
    if np.any(norms.data <= EPS_NORM):
        bad = int(np.argmax(norms.data.reshape(-1) <= EPS_NORM))
        raise DegenerateVectorError(f"row {bad} has norm below 1e-12")
    return x / norms


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# ------------------------------------------------------------------- volumes


def _triple(v) -> tuple:
    return (v, v, v) if isinstance(v, int) else tuple(v)


def _offsets(out_dims: tuple, stride: tuple):
    """Yield (k, slice triple) for the 27 kernel taps over a padded volume."""
    to, wo, ho = out_dims
    st, sw, sh = stride
    k = 0
    for dt in range(3):
        for dw in range(3):
            for dh in range(3):
                yield k, (slice(dt, dt + st * to, st), slice(dw, dw + sw * wo, sw),
                          slice(dh, dh + sh * ho, sh))
                k += 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride=1) -> Tensor:
    """3x3x3 cross-correlation with zero padding 1.

    ``x`` is ``(c_in, t, w, h)`` or batched ``(b, c_in, t, w, h)``. With the
    default stride of 1 the output keeps the input's spatio-temporal size.
    ``bias`` may be None.
    """
    single = x.ndim == 4
    if x.ndim not in (4, 5):
        raise DimensionError(f"conv3d input must be 4-D or 5-D, got {x.shape}")
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d kernel must be (c_out, c_in, 3, 3, 3), got {kernel.shape}")
    xd = x.data[None] if single else x.data
    c_out, c_in = kernel.shape[:2]
    if xd.shape[1] != c_in:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias must be ({c_out},), got {bias.shape}")
    stride = _triple(stride)
    b = xd.shape[0]
    in_dims = xd.shape[2:]
    out_dims = tuple((n - 1) // s + 1 for n, s in zip(in_dims, stride))
    npos = int(np.prod(out_dims))
    # channel-major padded copy: (c_in, b, t+2, w+2, h+2)
    xp = np.zeros((c_in, b) + tuple(n + 2 for n in in_dims))
    xp[:, :, 1:-1, 1:-1, 1:-1] = xd.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c_in, 27, b) + out_dims)
    for k, sl in _offsets(out_dims, stride):
        cols[:, k] = xp[(slice(None), slice(None)) + sl]
    cmat = cols.reshape(c_in * 27, b * npos)
    wmat = kernel.data.reshape(c_out, c_in * 27)
    out = wmat @ cmat
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((c_out, b) + out_dims).transpose(1, 0, 2, 3, 4)
    if single:
        out = out[0]
    need_x = x.requires_grad

    def bw(g):
        g5 = g[None] if single else g
        gmat = np.ascontiguousarray(g5.transpose(1, 0, 2, 3, 4)).reshape(c_out, b * npos)
        gk = (gmat @ cmat.T).reshape(kernel.shape)
        gb = (gmat.sum(axis=1),) if bias is not None else ()
        if not need_x:
            return (None, gk) + gb
        gcols = (wmat.T @ gmat).reshape((c_in, 27, b) + out_dims)
        gxp = np.zeros_like(xp)
        for k, sl in _offsets(out_dims, stride):
            gxp[(slice(None), slice(None)) + sl] += gcols[:, k]
        gx = gxp[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4)
        return ((gx[0] if single else gx), gk) + gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv3d")


def channel_avg_max_pool(f: Tensor) -> Tensor:
    """Stack the channel-wise mean and max of ``(..., c, t, w, h)`` into 2 channels."""
    if f.ndim not in (4, 5):
        raise DimensionError(f"expected (c,t,w,h) or (b,c,t,w,h), got {f.shape}")
    axis = f.ndim - 4
    return stack([mean(f, axis=axis), tmax(f, axis=axis)], axis=axis)


def pool_to_shape(f: Tensor, target: Sequence[int]) -> Tensor:
    """Non-overlapping block average over the trailing three axes."""
    target = tuple(int(v) for v in target)
    if f.ndim < 3:
        raise DimensionError("pool_to_shape needs at least three axes")
    lead = f.shape[:-3]
    dims = f.shape[-3:]
    if len(target) != 3 or any(t <= 0 or d % t for d, t in zip(dims, target)):
        raise DimensionError(f"cannot block-pool {dims} to {target}")
    if dims == target:
        return f
    blocks = [d // t for d, t in zip(dims, target)]
    shape = lead + (target[0], blocks[0], target[1], blocks[1], target[2], blocks[2])
    n = len(lead)
    return mean(reshape(f, shape), axis=(n + 1, n + 3, n + 5))


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` for every tensor on ``tape`` that ``loss`` depends on.

    A tape supports exactly one backward traversal, and leaves must start with
    ``grad is None``; both rules make silent gradient accumulation impossible.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    owner = loss._tape() if loss._tape is not None else None
    tape = tape if tape is not None else owner
    if tape is None or not loss.requires_grad:
        raise BackwardError("loss was not recorded on a tape")
    if owner is not tape:
        raise BackwardError("loss belongs to a different tape")
    if tape.consumed:
        raise BackwardError("backward already ran on this tape; reset it and recompute")
    produced = {id(r.out) for r in tape.records}
    for r in tape.records:
        for p in r.parents:
            if p.requires_grad and id(p) not in produced and p.grad is not None:
                raise BackwardError("leaf tensor already holds a gradient; call zero_grad() first")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        rec.out.grad = g
        pgrads = rec.backward_fn(g)
        for p, pg in zip(rec.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    # whatever remains belongs to leaves
    for rec in tape.records:
        for p in rec.parents:
            g = grads.pop(id(p), None)
            if g is not None:
                p.grad = g
    # saved activations are no longer needed
    tape.records.clear()


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckEntry:
    param: int
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


class _FrozenDetach:
    def __init__(self):
        self.values: list | None = None
        self.pos = 0

    def value(self, data: np.ndarray) -> np.ndarray:
        if self.recording:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values) or self.values[self.pos].shape != data.shape:
            raise BackwardError("frozen detach replay does not match the recorded pass")
        v = self.values[self.pos]
        self.pos += 1
        return v


def freeze_detached(f: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Wrap ``f`` so every ``detach()`` replays the value from the first call.

    Backprop treats detached tensors as constants; finite differences of the
    raw function do not, since perturbing a parameter moves the detached value
    too. Holding those values fixed at the unperturbed point gives the
    surrogate whose true derivative is exactly what backprop reports.
    """
    frozen = _FrozenDetach()

    def wrapped() -> Tensor:
        frozen.recording = frozen.values is None
        if frozen.recording:
            frozen.values = []
        frozen.pos = 0
        prev = getattr(_state, "frozen", None)
        _state.frozen = frozen
        try:
            return f()
        finally:
            _state.frozen = prev

    return wrapped


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step=1e-5,
               tolerance: float = 1e-4, num_coords: int | None = 20,
               rng: np.random.Generator | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` must rebuild its computation from the current ``params`` data on each
    call. ``num_coords=None`` checks every coordinate; otherwise coordinates are
    sampled uniformly over the concatenation of all parameters.

    ``step`` may be a sequence of step sizes. Each coordinate then keeps the
    difference quotient closest to the analytic value: a quotient is only an
    estimate of the derivative when no ReLU or max switch lies within the step,
    and large losses need larger steps to beat roundoff, so no single step
    suits every coordinate of a deep piecewise-linear network. A wrong
    gradient disagrees at every step size and still fails.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = [float(step)] if np.isscalar(step) else [float(h) for h in step]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if num_coords is None or num_coords >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=num_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(tolerance=tolerance)
    with no_tape():
        for fi in flat:
            pi = int(np.searchsorted(offsets, fi, side="right") - 1)
            local = int(fi - offsets[pi])
            p = params[pi]
            idx = np.unravel_index(local, p.shape)
            orig = p.data[idx]
            ana = float(analytic[pi][idx])
            best = None
            for h in steps:
                p.data[idx] = orig + h
                up = f().item()
                p.data[idx] = orig - h
                down = f().item()
                p.data[idx] = orig
                num = (up - down) / (2 * h)
                err = relative_error(ana, num, floor)
                if best is None or err < best[1]:
                    best = (num, err)
            report.entries.append(GradCheckEntry(pi, tuple(int(i) for i in idx), ana, best[0], best[1]))
    for p in params:
        p.grad = None
    return report
