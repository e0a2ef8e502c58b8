"""Dense float64 tensors with reverse-mode automatic differentiation.

Primitive operations record nodes on an explicit gradient tape; `backward`
replays the tape in reverse and accumulates gradients additively into every
participating tensor. Tapes are rebuilt per forward pass and are single-use.
All storage is 64-bit; sign conventions at non-differentiable points are
documented on the ops (relu/clamp kinks use subgradient 0, sign(0) = 0).
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, FormatError

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    """The innermost open tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered single-use recording of the primitive ops of one forward pass."""

    __slots__ = ("nodes", "used")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape context stack corrupted")
        return False


class _Node:
    __slots__ = ("out", "parents", "backward", "tape", "needs")

    def __init__(self, out, parents, backward, tape, needs):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.tape = tape
        self.needs = needs


class Tensor:
    """A dense n-dimensional float64 array, optionally linked to a tape node."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data with no tape link; never accumulates gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    # reductions / shape ops -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # operator sugar ---------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _needs_grad(t: Tensor) -> bool:
    if t.node is not None:
        return t.node.needs
    return t.requires_grad


def _record(out_data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap op output; record a node when a tape is open.

    `backward` maps the output gradient array to a tuple of per-parent
    gradient arrays (None to skip a parent).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        needs = any(_needs_grad(p) for p in parents)
        node = _Node(out, tuple(parents), backward, tape, needs)
        tape.nodes.append(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the tape.

    Gradients add across uses; a tape supports exactly one backward pass.
    """
    if loss.size != 1:
        raise ContractError("backward requires a scalar loss")
    if loss.node is None:
        raise ContractError("loss is detached from any tape")
    tape = loss.node.tape
    if tape.used:
        raise ContractError("tape already consumed; re-record the forward pass")
    tape.used = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if not node.needs:
            continue
        g = node.out.grad
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not _needs_grad(parent):
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pg


class frozen:
    """Context manager marking tensors as gradient-free (e.g. model weights
    during input-space attacks). Restores prior flags on exit."""

    def __init__(self, tensors):
        self._tensors = list(tensors)
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [t.requires_grad for t in self._tensors]
        for t in self._tensors:
            t.requires_grad = False
        return self

    def __exit__(self, exc_type, exc, tb):
        for t, flag in zip(self._tensors, self._saved):
            t.requires_grad = flag
        return False


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    """Broadcast rule: equal shapes, or one operand is a single element."""
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(
        f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable"
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # single-element operand broadcast against a larger one
    return grad.sum().reshape(shape) if np.prod(shape, dtype=int) == 1 else grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    """Logistic function, evaluated via tanh for overflow safety."""
    a = _as_tensor(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    """max(x, 0); subgradient at the kink is 0."""
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; subgradient 0 at and beyond either bound."""
    a = _as_tensor(a)
    if lo is None and hi is None:
        raise ContractError("clamp requires at least one bound")
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi

    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra / reductions / shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        da = g @ bd.T if _needs_grad(a) else None
        db = ad.T @ g if _needs_grad(b) else None
        return da, db

    return _record(out, (a, b), bwd)


def add_rowvec(m, v) -> Tensor:
    """(N, M) + (M,) broadcast add, used for dense-layer biases."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: incompatible shapes {m.shape} and {v.shape}")
    out = m.data + v.data[None, :]

    def bwd(g):
        dv = g.sum(axis=0) if _needs_grad(v) else None
        return g, dv

    return _record(out, (m, v), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() if not keepdims else g * np.ones(a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) > 1:
        raise DimensionError("reshape allows at most one -1 extent")
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def softmax(a) -> Tensor:
    """Row softmax of a rank-2 tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("softmax expects a rank-2 tensor")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (a,), bwd)


def logsumexp(a) -> Tensor:
    """Row log-sum-exp of a rank-2 tensor, returned as (N, 1)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("logsumexp expects a rank-2 tensor")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)

    def bwd(g):
        return (g * (e / s),)

    return _record(out, (a,), bwd)


def stack_cols(columns: Sequence[Tensor]) -> Tensor:
    """Concatenate (N, 1) tensors into an (N, K) tensor."""
    cols = [_as_tensor(c) for c in columns]
    if not cols:
        raise ContractError("stack_cols requires at least one column")
    for c in cols:
        if c.ndim != 2 or c.shape[1] != 1 or c.shape[0] != cols[0].shape[0]:
            raise DimensionError("stack_cols expects equal-length (N, 1) columns")
    out = np.concatenate([c.data for c in cols], axis=1)

    def bwd(g):
        return tuple(g[:, k : k + 1] for k in range(len(cols)))

    return _record(out, tuple(cols), bwd)


def gather_cols(a, idx) -> Tensor:
    """Select one column per row: (N, K) gathered by idx (N,) -> (N, 1)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError("gather_cols expects (N, K) data and (N,) indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise DimensionError(f"gather_cols index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx][:, None]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, idx), g[:, 0])
        return (da,)

    return _record(out, (a,), bwd)


def row_max(a) -> Tensor:
    """Per-row maximum of (N, K) -> (N, 1); ties route gradient to the first max."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("row_max expects a rank-2 tensor")
    idx = a.data.argmax(axis=1)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx][:, None]

    def bwd(g):
        da = np.zeros_like(a.data)
        da[rows, idx] = g[:, 0]
        return (da,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and FCkk kernel")
    n, c, h, wth = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    hp, wp = h + 2 * padding, wth + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("conv2d kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    parents: tuple = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise DimensionError("conv2d bias must have one entry per filter")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    wd = w.data

    def bwd(g):
        dx = None
        if _needs_grad(x):
            dcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding : padding + h, padding : padding + wth] if padding else dxp
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if _needs_grad(w) else None
        if len(parents) == 3:
            db = g.sum(axis=(0, 2, 3)) if _needs_grad(parents[2]) else None
            return dx, dw, db
        return dx, dw

    return _record(out, parents, bwd)


def conv2d_transpose(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed convolution: NCHW input, kernel (C_in, F, k, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d_transpose expects NCHW input and CFkk kernel")
    n, c, h, wth = x.shape
    cw, f, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d_transpose channel mismatch: input {c}, kernel {cw}")
    ho = (h - 1) * stride + kh
    wo = (wth - 1) * stride + kw
    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N, H, W, F, kh, kw)
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * h : stride, j : j + stride * wth : stride] += t[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    parents: tuple = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise DimensionError("conv2d_transpose bias must have one entry per filter")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    xd, wd = x.data, w.data

    def bwd(g):
        gcols = np.empty((n, f, kh, kw, h, wth), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = g[:, :, i : i + stride * h : stride, j : j + stride * wth : stride]
        dx = (
            np.tensordot(gcols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
            if _needs_grad(x)
            else None
        )
        dw = (
            np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 4, 5]))
            if _needs_grad(w)
            else None
        )
        if len(parents) == 3:
            db = g.sum(axis=(0, 2, 3)) if _needs_grad(parents[2]) else None
            return dx, dw, db
        return dx, dw

    return _record(out, parents, bwd)


def maxpool2d(x, pool: int) -> Tensor:
    """Non-overlapping pool x pool max; trailing rows/cols that do not fill a
    window are dropped. Gradient routes to the first maximal element (row-major
    within the window) on ties."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW input")
    if pool < 1:
        raise ContractError("pool size must be positive")
    n, c, h, w = x.shape
    ho, wo = h // pool, w // pool
    if ho < 1 or wo < 1:
        raise DimensionError("maxpool2d window larger than input")
    xc = x.data[:, :, : ho * pool, : wo * pool]
    win = xc.reshape(n, c, ho, pool, wo, pool).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, pool * pool)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxc = dwin.reshape(n, c, ho, wo, pool, pool).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, ho * pool, wo * pool
        )
        if ho * pool == h and wo * pool == w:
            return (dxc,)
        dx = np.zeros((n, c, h, w), dtype=np.float64)
        dx[:, :, : ho * pool, : wo * pool] = dxc
        return (dx,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# non-tape helpers
# ---------------------------------------------------------------------------


def sign(x: np.ndarray) -> np.ndarray:
    """Attack-facing sign with sign(0) = 0."""
    return np.sign(x)


# ---------------------------------------------------------------------------
# serialization: little-endian blob (u32 rank, u32 extents, f64 payload)
# ---------------------------------------------------------------------------


def to_blob(t: Tensor) -> bytes:
    rank = t.ndim
    header = struct.pack("<I", rank) + struct.pack(f"<{rank}I", *t.shape)
    return header + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def from_blob(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    if len(buf) < offset + 4:
        raise FormatError("tensor blob truncated before rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise FormatError("tensor blob truncated in extents")
    extents = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(extents)) if rank else 1
    nbytes = 8 * count
    if len(buf) < offset + nbytes:
        raise FormatError("tensor blob truncated in payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    offset += nbytes
    return Tensor(data.reshape(extents)), offset
