"""Dense N-d tensors with reverse-mode automatic differentiation.

A :class:`Tensor` is a contiguous row-major numpy buffer plus an optional
handle into a :class:`Tape`. Layout convention throughout the package is
``[batch, channel, spatial...]``. Operations record themselves on the tape
of their inputs; :meth:`Tape.backward` replays the recorded nodes in
reverse append order and accumulates gradients into pre-zeroed buffers,
so leaf gradients are summed, never overwritten.

Training and testing run in float64; float32 is available as a fast mode.
uint8 tensors are plain data containers (labels) and reject arithmetic.

The module also implements the binary tensor file format used for
datasets and checkpoint payloads: magic ``AGT1``, one dtype byte
(0=f32, 1=f64, 2=u8), one rank byte, ``rank`` little-endian u32 extents,
then the raw little-endian buffer.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, ShapeError, TapeError

_DTYPES = {"f32": np.float32, "f64": np.float64, "u8": np.uint8}
_DTYPE_CODES = {"f32": 0, "f64": 1, "u8": 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_MAGIC = b"AGT1"

GRAD_DTYPES = ("f32", "f64")


class Tensor:
    """Contiguous row-major buffer, optionally tracked on one tape."""

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, dtype: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_DTYPES[dtype], copy=False)
        elif arr.dtype == np.float32:
            pass
        elif arr.dtype == np.uint8:
            pass
        else:
            arr = arr.astype(np.float64, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.tape: Tape | None = None
        self.grad_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                np.dtype(np.uint8): "u8"}[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.grad_id is not None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self) -> "Tensor":
        return total(self)

    def __repr__(self) -> str:
        grad = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


class _Node:
    __slots__ = ("name", "input_ids", "out_id", "backward_fn")

    def __init__(self, name, input_ids, out_id, backward_fn):
        self.name = name
        self.input_ids = input_ids
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of primitive ops; replayed in reverse for grads."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._dtypes: dict[int, np.dtype] = {}
        self._leaf_ids: list[int] = []
        self._next_id = 0

    def _register(self, t: Tensor) -> int:
        gid = self._next_id
        self._next_id += 1
        t.tape = self
        t.grad_id = gid
        self._shapes[gid] = t.shape
        self._dtypes[gid] = t.data.dtype
        return gid

    def watch(self, t: Tensor) -> Tensor:
        """Mark ``t`` as a differentiable leaf on this tape."""
        if t.grad_id is not None:
            raise TapeError("tensor already participates in a tape")
        if t.dtype not in GRAD_DTYPES:
            raise TapeError(f"cannot differentiate through dtype {t.dtype}")
        self._leaf_ids.append(self._register(t))
        return t

    def leaf(self, data, dtype: str | None = None) -> Tensor:
        """Create a tensor and watch it in one step."""
        return self.watch(Tensor(data, dtype=dtype))

    def record(self, name: str, inputs: Sequence[Tensor], out: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        """Append one primitive op; ``backward_fn`` maps d(out) to d(inputs)."""
        self._register(out)
        self.nodes.append(_Node(name, [t.grad_id for t in inputs], out.grad_id, backward_fn))
        return out

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar root.

        Returns a map leaf grad_id -> gradient tensor. Leaves not reachable
        from the root get zero gradients of their own shape.
        """
        if root.tape is not self or root.grad_id is None:
            raise TapeError("backward root is not on this tape")
        if root.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {
            root.grad_id: np.ones(root.shape, dtype=self._dtypes[root.grad_id])
        }
        for node in reversed(self.nodes):
            g = grads.get(node.out_id)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for gid, ig in zip(node.input_ids, input_grads):
                if gid is None or ig is None:
                    continue
                acc = grads.get(gid)
                if acc is None:
                    acc = np.zeros(self._shapes[gid], dtype=self._dtypes[gid])
                    grads[gid] = acc
                acc += ig
        out: dict[int, Tensor] = {}
        for gid in self._leaf_ids:
            g = grads.get(gid)
            if g is None:
                g = np.zeros(self._shapes[gid], dtype=self._dtypes[gid])
            out[gid] = Tensor(g)
        return out


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.grad_id is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("inputs live on different tapes")
    return tape


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if any input is tracked."""
    out = Tensor(out_data)
    tape = _tape_of(inputs)
    if tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


def _check_float(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.dtype not in GRAD_DTYPES:
            raise ShapeError(f"{name}: dtype {t.dtype} does not support arithmetic")
    if len({t.dtype for t in ts}) > 1:
        raise ShapeError(f"{name}: mixed dtypes {[t.dtype for t in ts]}")


def _check_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_float("add", a, b)
    _check_same_shape("add", a, b)
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_float("sub", a, b)
    _check_same_shape("sub", a, b)
    return record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_float("mul", a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    _check_float("neg", a)
    return record("neg", [a], -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Scalar-times-tensor; the one broadcasting form supported."""
    _check_float("scale", a)
    return record("scale", [a], a.data * c, lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) scalar."""
    _check_float("sum", a)
    shape = a.shape
    return record("sum", [a], a.data.sum().reshape(1),
                  lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def weighted_sum(w: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """``sum_i w[i] * xs[i]`` for a 1-d weight vector and same-shape tensors.

    Gradients flow both to the weights and to every summand.
    """
    _check_float("weighted_sum", w, *xs)
    if w.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: weight shape {w.shape} vs {len(xs)} tensors")
    for x in xs[1:]:
        _check_same_shape("weighted_sum", xs[0], x)
    wd = w.data
    stack = [x.data for x in xs]
    out = np.zeros_like(stack[0])
    for wi, xd in zip(wd, stack):
        out += wi * xd
    w_tracked = w.grad_id is not None
    xs_tracked = [x.grad_id is not None for x in xs]

    def backward(g):
        gw = None
        if w_tracked:
            gw = np.array([np.sum(g * xd) for xd in stack], dtype=g.dtype)
        gxs = [wi * g if tr else None for wi, tr in zip(wd, xs_tracked)]
        return [gw, *gxs]

    return record("weighted_sum", [w, *xs], out, backward)


def gather(v: Tensor, indices: Sequence[int]) -> Tensor:
    """Select entries of a 1-d tensor; backward scatter-adds into place."""
    _check_float("gather", v)
    if len(v.shape) != 1:
        raise ShapeError(f"gather: expected 1-d tensor, got shape {v.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise ShapeError(f"gather: index out of range for extent {v.shape[0]}")
    n = v.shape[0]

    def backward(g):
        gv = np.zeros(n, dtype=g.dtype)
        np.add.at(gv, idx, g)
        return (gv,)

    return record("gather", [v], v.data[idx], backward)


def save_tensor(path, t: Tensor) -> None:
    """Write a tensor in the AGT1 binary format."""
    arr = t.data
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_CODES[t.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> Tensor:
    """Read an AGT1 tensor file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated header")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    head = 6 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    dtype = np.dtype(_DTYPES[_CODE_DTYPES[code]]).newbyteorder("<")
    expect = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != head + expect:
        raise FormatError(f"{path}: payload is {len(raw) - head} bytes, expected {expect}")
    arr = np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("=")))
