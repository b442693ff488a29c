"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Every operation that touches a taped tensor appends a node to that tensor's
:class:`Tape`.  ``grad`` walks the tape backwards and accumulates adjoints.
Backward rules are themselves written in terms of the primitives here, so a
gradient pass run with ``create_graph=True`` is recorded like any other
computation and can be differentiated again; that is what makes exact
second-order meta-gradients possible without a separate forward-mode.

There is no global tape.  Tensors built from raw data are constants: they
never receive gradient and mixing tensors from two different tapes in one
operation is an error.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "binary_elementwise",
    "matmul",
    "transpose",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "neg",
    "unary",
    "reduce_sum",
    "reshape",
    "broadcast_to",
    "segment_sum",
    "gather_rows",
    "concat",
    "slice_axis",
    "dropout",
    "bce_elements",
    "bce_with_logits",
    "grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


def _as_f64(values) -> np.ndarray:
    # np.ascontiguousarray would promote rank-0 to rank-1, so guard it
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Immutable dense float64 array, optionally recorded on a tape.

    ``tape is None`` marks a constant: it takes part in arithmetic but its
    gradient is identically zero and nothing flows through it.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = _as_f64(values)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value, off the tape."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of primitive operations.

    A tape is owned by a single training step; nothing here is shared or
    global, so independent steps can run concurrently on separate tapes.
    ``generation`` counts recorded nodes and doubles as the next node id.
    """

    __slots__ = ("_nodes", "generation")

    def __init__(self):
        self._nodes: list[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, op, inputs, backward) -> int:
        nid = self.generation
        self._nodes.append(_Node(op, inputs, backward))
        self.generation = nid + 1
        return nid

    def tensor(self, values) -> Tensor:
        """Record a leaf tensor that can receive gradient."""
        data = _as_f64(values)
        nid = self._append("leaf", None, None)
        return Tensor(data, self, nid)

    def watch(self, t: Tensor) -> Tensor:
        """Record the value of an existing tensor as a leaf on this tape."""
        return self.tensor(t.data)


_state = threading.local()


def _recording_paused() -> bool:
    return getattr(_state, "pause", 0) > 0


@contextlib.contextmanager
def _pause_recording():
    _state.pause = getattr(_state, "pause", 0) + 1
    try:
        yield
    finally:
        _state.pause -= 1


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data``, recording a node unless untaped or recording is paused."""
    if _recording_paused():
        return Tensor(out_data)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError(f"operands of {op!r} are recorded on different tapes")
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if t.tape is not None else None for t in inputs)
    nid = tape._append(op, ids, backward)
    return Tensor(out_data, tape, nid)


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match "
                         "(only rank-0 operands broadcast)")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a gradient back to ``shape`` after a rank-0 broadcast."""
    if g.shape == shape:
        return g
    return reshape(reduce_sum(g), shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def bwd(up, needs):
        ga = _unbroadcast(up, a.shape) if needs[0] else None
        gb = _unbroadcast(up, b.shape) if needs[1] else None
        return ga, gb

    return _apply("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def bwd(up, needs):
        ga = _unbroadcast(up, a.shape) if needs[0] else None
        gb = _unbroadcast(neg(up), b.shape) if needs[1] else None
        return ga, gb

    return _apply("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def bwd(up, needs):
        ga = _unbroadcast(mul(up, b), a.shape) if needs[0] else None
        gb = _unbroadcast(mul(up, a), b.shape) if needs[1] else None
        return ga, gb

    return _apply("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains an exact zero")
    out = a.data / b.data

    def bwd(up, needs):
        ga = _unbroadcast(div(up, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(up, a), mul(b, b))), b.shape)
        return ga, gb

    return _apply("div", out, (a, b), bwd)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def binary_elementwise(kind: str, a, b) -> Tensor:
    """Dispatch to one of add/sub/mul/div by name."""
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise ValueError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(up, needs):
        ga = matmul(up, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), up) if needs[1] else None
        return ga, gb

    return _apply("matmul", out, (a, b), bwd)


def transpose(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 operand, got {x.shape}")

    def bwd(up, needs):
        return (transpose(up),)

    return _apply("transpose", x.data.T, (x,), bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = _stable_sigmoid(x.data)
    holder = []

    def bwd(up, needs):
        res = holder[0]
        return (mul(mul(up, res), sub(1.0, res)),)

    result = _apply("sigmoid", out, (x,), bwd)
    holder.append(result)
    return result


def tanh(x) -> Tensor:
    x = _coerce(x)
    out = np.tanh(x.data)
    holder = []

    def bwd(up, needs):
        res = holder[0]
        return (mul(up, sub(1.0, mul(res, res))),)

    result = _apply("tanh", out, (x,), bwd)
    holder.append(result)
    return result


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    holder = []

    def bwd(up, needs):
        return (mul(up, holder[0]),)

    result = _apply("exp", out, (x,), bwd)
    holder.append(result)
    return result


def log(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: operand must be strictly positive")
    out = np.log(x.data)

    def bwd(up, needs):
        return (div(up, x),)

    return _apply("log", out, (x,), bwd)


def neg(x) -> Tensor:
    x = _coerce(x)

    def bwd(up, needs):
        return (neg(up),)

    return _apply("neg", -x.data, (x,), bwd)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "neg": neg}


def unary(kind: str, x) -> Tensor:
    """Dispatch to one of sigmoid/tanh/exp/log/neg by name."""
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(x)


def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    """Sum over one axis, or over all elements when ``axis`` is None.

    The reduced axis is dropped; a full reduction yields a rank-0 tensor.
    """
    x = _coerce(x)
    if axis is not None:
        if not 0 <= axis < x.ndim:
            raise ShapeError(f"reduce_sum: axis {axis} out of range for shape {x.shape}")
        out = x.data.sum(axis=axis)
    else:
        out = x.data.sum()

    def bwd(up, needs):
        if axis is None:
            return (broadcast_to(up, x.shape),)
        kept = list(x.shape)
        kept[axis] = 1
        return (broadcast_to(reshape(up, tuple(kept)), x.shape),)

    return _apply("reduce_sum", out, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def bwd(up, needs):
        return (reshape(up, x.shape),)

    return _apply("reshape", out, (x,), bwd)


def broadcast_to(x, shape) -> Tensor:
    """Expand a rank-0 tensor to any shape, or size-1 axes to larger extents."""
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if x.ndim == 0:
        expanded_axes = list(range(len(shape)))
    else:
        if x.ndim != len(shape):
            raise ShapeError(f"broadcast_to: rank {x.ndim} does not match target {shape}")
        expanded_axes = []
        for i, (have, want) in enumerate(zip(x.shape, shape)):
            if have == want:
                continue
            if have != 1:
                raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
            expanded_axes.append(i)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def bwd(up, needs):
        g = up
        for ax in reversed(expanded_axes):
            g = reduce_sum(g, axis=ax)
        return (reshape(g, x.shape),)

    return _apply("broadcast_to", out, (x,), bwd)


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of a rank-2 tensor into ``num_segments`` buckets.

    ``segment_ids`` is one integer per row; empty segments come out as zero
    rows.  This is the message-aggregation and graph-readout primitive.
    """
    values = _coerce(values)
    if values.ndim != 2:
        raise ShapeError(f"segment_sum needs rank-2 values, got {values.shape}")
    ids = np.ascontiguousarray(np.asarray(segment_ids, dtype=np.int64))
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise ShapeError(
            f"segment_sum: ids shape {ids.shape} does not match {values.shape[0]} rows")
    if num_segments <= 0:
        raise ValueError("segment_sum: num_segments must be positive")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError("segment_sum: segment id out of range")
    out = _kernels.scatter_add_rows(values.data, ids, num_segments)

    def bwd(up, needs):
        return (gather_rows(up, ids),)

    return _apply("segment_sum", out, (values,), bwd)


def gather_rows(x, row_ids) -> Tensor:
    """Select rows of a rank-2 tensor; the adjoint of ``segment_sum``."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 operand, got {x.shape}")
    ids = np.ascontiguousarray(np.asarray(row_ids, dtype=np.int64))
    if ids.ndim != 1:
        raise ShapeError("gather_rows: row ids must be a vector")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise IndexError("gather_rows: row id out of range")
    out = x.data[ids]

    def bwd(up, needs):
        return (segment_sum(up, ids, x.shape[0]),)

    return _apply("gather_rows", out, (x,), bwd)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    rank = parts[0].ndim
    if not 0 <= axis < rank:
        raise ShapeError(f"concat: axis {axis} out of range for rank {rank}")
    for p in parts[1:]:
        if p.ndim != rank:
            raise ShapeError("concat: operands differ in rank")
        for i in range(rank):
            if i != axis and p.shape[i] != parts[0].shape[i]:
                raise ShapeError(
                    f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(up, needs):
        return tuple(
            slice_axis(up, axis, int(offsets[i]), int(offsets[i + 1])) if needs[i] else None
            for i in range(len(parts)))

    return _apply("concat", out, tuple(parts), bwd)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"slice_axis: axis {axis} out of range for shape {x.shape}")
    extent = x.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice_axis: bounds [{start}, {stop}) invalid for extent {extent}")
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    out = np.ascontiguousarray(x.data[index])

    def bwd(up, needs):
        pieces = []
        if start > 0:
            lo_shape = list(x.shape)
            lo_shape[axis] = start
            pieces.append(Tensor(np.zeros(lo_shape)))
        pieces.append(up)
        if stop < extent:
            hi_shape = list(x.shape)
            hi_shape[axis] = extent - stop
            pieces.append(Tensor(np.zeros(hi_shape)))
        if len(pieces) == 1:
            return (up,)
        return (concat(pieces, axis=axis),)

    return _apply("slice_axis", out, (x,), bwd)


def dropout(x, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale kept values by 1/(1-p).

    Identity when ``training`` is false or ``p`` is zero.  The gradient flows
    through the same mask that was applied forward.
    """
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in training mode")
    keep = rng.random(x.shape) >= p
    mask = np.where(keep, 1.0 / (1.0 - p), 0.0)
    return mul(x, Tensor(mask))


def bce_elements(logits, labels) -> Tensor:
    """Element-wise binary cross-entropy on logits, numerically stable.

    Uses max(z, 0) - z*y + log(1 + exp(-|z|)); labels must be exactly 0 or 1
    and are treated as data (no gradient flows to them).
    """
    logits = _coerce(logits)
    labels = _coerce(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"bce: logits {logits.shape} and labels {labels.shape} differ")
    y = labels.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce: labels must be exactly 0 or 1")
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bwd(up, needs):
        gz = mul(up, sub(sigmoid(logits), labels.detach())) if needs[0] else None
        return gz, None

    return _apply("bce_elements", out, (logits, labels), bwd)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy over a vector of logits."""
    logits = _coerce(logits)
    labels = _coerce(labels)
    if logits.ndim != 1 or labels.ndim != 1:
        raise ShapeError("bce_with_logits expects rank-1 logits and labels")
    if logits.shape[0] == 0:
        raise ShapeError("bce_with_logits: empty input")
    elems = bce_elements(logits, labels)
    return mul(reduce_sum(elems), 1.0 / logits.shape[0])


def tensor(values) -> Tensor:
    """A constant tensor (never receives gradient)."""
    return Tensor(values)


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the backward pass is recorded on the same tape,
    so the returned gradients can be differentiated again.  Otherwise the
    returned gradients are constants.  A constant output has zero gradient
    everywhere.
    """
    if output.tape is None:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    if output.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    for t in inputs:
        if t.tape is None:
            raise ValueError("grad: input is a constant, not recorded on a tape")
        if t.tape is not tape:
            raise ValueError("grad: input recorded on a different tape than the output")

    requested = {t.node for t in inputs}
    adjoints: dict[int, Tensor] = {output.node: Tensor(np.ones_like(output.data))}
    final: dict[int, Tensor] = {}

    ctx = contextlib.nullcontext() if create_graph else _pause_recording()
    with ctx:
        for nid in range(output.node, -1, -1):
            g = adjoints.pop(nid, None)
            if g is None:
                continue
            if nid in requested:
                final[nid] = g
            node = tape._nodes[nid]
            if node.inputs is None:
                continue
            needs = tuple(i is not None for i in node.inputs)
            gs = node.backward(g, needs)
            for iid, gi in zip(node.inputs, gs):
                if iid is None or gi is None:
                    continue
                cur = adjoints.get(iid)
                adjoints[iid] = gi if cur is None else add(cur, gi)

    results = []
    for t in inputs:
        g = final.get(t.node)
        results.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return results
