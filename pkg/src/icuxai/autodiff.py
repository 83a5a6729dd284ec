"""Reverse-mode automatic differentiation on an explicit tape.

All values are dense, row-major ``float64`` numpy arrays. A :class:`Tape`
records every primitive application as an append-only node list, so node
order is already a topological order and the backward sweep is a single
reverse pass over the list. Each node stores its primitive kind, the ids
of its inputs, and whatever forward context its vector-Jacobian product
needs; the forward value of every node is kept on the tape so later
passes (gradients, relevance propagation) can revisit it.

``detach`` inserts a stop-gradient marker: identity in the forward pass,
zero gradient to its parent. This is the single mechanism used to freeze
attention maps and normalization denominators during attribution.

Any NaN or Inf produced by a primitive forward raises
:class:`NonFiniteError` immediately instead of propagating silently —
division by zero, log of a non-positive value and overflowing exp are
all hard errors.

Tapes are single-writer: record from one thread only. Once the forward
pass is done, concurrent reads of values and gradients are safe.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "TapeError",
    "Node",
    "Tape",
    "Tensor",
    "PRIMITIVE_KINDS",
    "forward_primitive",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "sum_over_axis",
    "mean_over_axis",
    "max_over_axis",
    "exp",
    "log",
    "sqrt",
    "relu",
    "softmax_over_axis",
    "scale",
    "broadcast_to",
    "gather_rows",
    "detach",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf in its forward output."""


class TapeError(RuntimeError):
    """Misuse of a tape (backward twice, cross-tape operands, bad seed)."""


class Node:
    """One recorded primitive application."""

    __slots__ = ("kind", "inputs", "ctx")

    def __init__(self, kind: str, inputs: tuple[int, ...], ctx: dict):
        self.kind = kind
        self.inputs = inputs
        self.ctx = ctx

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node({self.kind!r}, inputs={self.inputs})"


class Tensor:
    """Handle to one node's value on a tape."""

    __slots__ = ("tape", "node_id", "data")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray | None:
        """Gradient accumulated for this node by the last backward pass."""
        return self.tape.grads[self.node_id]

    # --- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        if _is_number(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_over_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean_over_axis(self, axis, keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return max_over_axis(self, axis, keepdims)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class Tape:
    """Append-only record of primitive applications.

    ``nodes[i]`` describes how ``values[i]`` was computed; ``grads[i]`` is
    the gradient buffer filled by :func:`backward`. Node ids are assigned
    in creation order, so every node's inputs have smaller ids and the
    list is its own topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.grads: list[np.ndarray | None] = []
        self._backward_done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, kind: str, inputs: tuple[int, ...], ctx: dict,
                value: np.ndarray) -> Tensor:
        self.nodes.append(Node(kind, inputs, ctx))
        self.values.append(value)
        self.grads.append(None)
        return Tensor(self, len(self.nodes) - 1, value)

    def leaf(self, value, param: bool = False, name: str | None = None) -> Tensor:
        """Register an input value (data or parameter) as a leaf node.

        ``param=True`` marks constants and trained weights; relevance
        propagation treats those as mixing weights rather than inputs.
        """
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value contains NaN or Inf")
        return self._record("leaf", (), {"param": param, "name": name}, arr)

    def reset_grads(self) -> None:
        """Clear all gradient buffers so backward may run again."""
        self.grads = [None] * len(self.nodes)
        self._backward_done = False


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def _coerce(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.leaf(np.asarray(x, dtype=np.float64), param=True)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TapeError("at least one operand must be a Tensor")


def _check_finite(kind: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"primitive {kind!r} produced a non-finite value")
    return arr


def _binary(kind: str, a, b, op: Callable) -> Tensor:
    tape = _tape_of(a, b)
    a = _coerce(tape, a)
    b = _coerce(tape, b)
    if a.data.shape != b.data.shape:
        out_shape = np.broadcast_shapes(a.data.shape, b.data.shape)
        if a.data.shape != out_shape:
            a = broadcast_to(a, out_shape)
        if b.data.shape != out_shape:
            b = broadcast_to(b, out_shape)
    with np.errstate(all="ignore"):
        value = op(a.data, b.data)
    _check_finite(kind, value)
    return tape._record(kind, (a.node_id, b.node_id), {}, value)


# --- primitive forwards -------------------------------------------------

def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply)


def div(a, b) -> Tensor:
    """Elementwise division. Division by zero is a hard error."""
    return _binary("div", a, b, np.divide)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must broadcast."""
    tape = _tape_of(a, b)
    a = _coerce(tape, a)
    b = _coerce(tape, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions do not agree: {a.data.shape} @ {b.data.shape}")
    with np.errstate(all="ignore"):
        value = a.data @ b.data
    _check_finite("matmul", value)
    return tape._record("matmul", (a.node_id, b.node_id), {}, value)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(int(ax) for ax in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ValueError(f"axes {axes} is not a permutation for ndim {x.ndim}")
    value = np.transpose(x.data, axes)
    return x.tape._record("transpose", (x.node_id,), {"axes": axes}, value)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    try:
        value = np.reshape(x.data, shape)
    except ValueError as e:
        raise ValueError(f"cannot reshape {x.data.shape} to {shape}") from e
    return x.tape._record("reshape", (x.node_id,), {"shape": x.data.shape}, value)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one input")
    tape = _tape_of(*tensors)
    tensors = [_coerce(tape, t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError("concat inputs must have the same rank")
        for ax in range(ndim):
            if ax != axis and t.data.shape[ax] != tensors[0].data.shape[ax]:
                raise ValueError(
                    f"concat shapes differ off-axis: {t.data.shape} vs {tensors[0].data.shape}")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = tuple(t.data.shape[axis] for t in tensors)
    return tape._record("concat", tuple(t.node_id for t in tensors),
                        {"axis": axis, "sizes": sizes}, value)


def _validate_key(key, shape) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise IndexError(f"too many indices for shape {shape}")
    for item, dim in zip(key, shape):
        if isinstance(item, (int, np.integer)):
            if not -dim <= item < dim:
                raise IndexError(f"index {item} out of range for axis of size {dim}")
        elif isinstance(item, slice):
            for bound in (item.start, item.stop):
                if bound is not None and not -dim <= bound <= dim:
                    raise IndexError(f"slice bound {bound} out of range for axis of size {dim}")
            if item.step is not None and item.step <= 0:
                raise IndexError("slice step must be positive")
        else:
            raise TypeError(f"unsupported index {item!r} (ints and slices only)")
    return key


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing with strict bounds checking (no silent clipping)."""
    key = _validate_key(key, x.data.shape)
    value = np.asarray(x.data[key])
    return x.tape._record("slice", (x.node_id,), {"key": key, "shape": x.data.shape}, value)


def _reduction(kind: str, x: Tensor, axis, keepdims: bool, op: Callable) -> Tensor:
    value = np.asarray(op(x.data, axis=axis, keepdims=keepdims))
    _check_finite(kind, value)
    ctx = {"axis": axis, "keepdims": keepdims, "shape": x.data.shape}
    return x.tape._record(kind, (x.node_id,), ctx, value)


def sum_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduction("sum-over-axis", x, axis, keepdims, np.sum)


def mean_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduction("mean-over-axis", x, axis, keepdims, np.mean)


def max_over_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduction("max-over-axis", x, axis, keepdims, np.max)


def _unary(kind: str, x: Tensor, op: Callable) -> Tensor:
    with np.errstate(all="ignore"):
        value = op(x.data)
    _check_finite(kind, value)
    return x.tape._record(kind, (x.node_id,), {}, value)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, np.exp)


def log(x: Tensor) -> Tensor:
    """Natural log. Non-positive inputs raise NonFiniteError."""
    return _unary("log", x, np.log)


def sqrt(x: Tensor) -> Tensor:
    return _unary("sqrt", x, np.sqrt)


def relu(x: Tensor) -> Tensor:
    value = np.maximum(x.data, 0.0)
    return x.tape._record("relu", (x.node_id,), {}, value)


def softmax_over_axis(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction happens internally)."""
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    value = e / np.sum(e, axis=axis, keepdims=True)
    _check_finite("softmax-over-axis", value)
    return x.tape._record("softmax-over-axis", (x.node_id,), {"axis": axis}, value)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    if not np.isfinite(factor):
        raise NonFiniteError("scale factor must be finite")
    value = x.data * factor
    _check_finite("scale", value)
    return x.tape._record("scale", (x.node_id,), {"factor": factor}, value)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    value = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return x.tape._record("broadcast", (x.node_id,), {"shape": x.data.shape}, value)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` along axis 0 (embedding lookup)."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather-rows indices must be integers")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather-rows index out of range for table of {n} rows")
    value = table.data[idx]
    return table.tape._record("gather-rows", (table.node_id,),
                              {"indices": idx.copy(), "rows": n}, value)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient marker: forward identity, zero upstream gradient."""
    return x.tape._record("detach", (x.node_id,), {}, x.data)


_FORWARDS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "slice": slice_,
    "sum-over-axis": sum_over_axis,
    "mean-over-axis": mean_over_axis,
    "max-over-axis": max_over_axis,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "softmax-over-axis": softmax_over_axis,
    "scale": scale,
    "broadcast": broadcast_to,
    "gather-rows": gather_rows,
    "detach": detach,
}

PRIMITIVE_KINDS = tuple(_FORWARDS)


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by its kind string (the stable dispatch surface)."""
    try:
        fn = _FORWARDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- backward -----------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expand_reduced(g: np.ndarray, node: Node) -> np.ndarray:
    """Re-insert reduced axes so `g` broadcasts against the reduction input."""
    axis, keepdims, shape = node.ctx["axis"], node.ctx["keepdims"], node.ctx["shape"]
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _vjp_add(tape, nid, node, g):
    return ((node.inputs[0], g), (node.inputs[1], g))


def _vjp_sub(tape, nid, node, g):
    return ((node.inputs[0], g), (node.inputs[1], -g))


def _vjp_mul(tape, nid, node, g):
    a, b = node.inputs
    return ((a, g * tape.values[b]), (b, g * tape.values[a]))


def _vjp_div(tape, nid, node, g):
    a, b = node.inputs
    vb = tape.values[b]
    ga = g / vb
    return ((a, ga), (b, -ga * tape.values[a] / vb))


def _vjp_matmul(tape, nid, node, g):
    a, b = node.inputs
    va, vb = tape.values[a], tape.values[b]
    ga = _reduce_to(g @ np.swapaxes(vb, -1, -2), va.shape)
    gb = _reduce_to(np.swapaxes(va, -1, -2) @ g, vb.shape)
    return ((a, ga), (b, gb))


def _vjp_transpose(tape, nid, node, g):
    axes = node.ctx["axes"]
    if axes is None:
        return ((node.inputs[0], np.transpose(g)),)
    inverse = np.argsort(axes)
    return ((node.inputs[0], np.transpose(g, inverse)),)


def _vjp_reshape(tape, nid, node, g):
    return ((node.inputs[0], np.reshape(g, node.ctx["shape"])),)


def _vjp_concat(tape, nid, node, g):
    axis, sizes = node.ctx["axis"], node.ctx["sizes"]
    out, offset = [], 0
    key = [slice(None)] * g.ndim
    for pid, size in zip(node.inputs, sizes):
        key[axis] = slice(offset, offset + size)
        out.append((pid, g[tuple(key)]))
        offset += size
    return out


def _vjp_slice(tape, nid, node, g):
    full = np.zeros(node.ctx["shape"], dtype=np.float64)
    full[node.ctx["key"]] = g
    return ((node.inputs[0], full),)


def _vjp_sum(tape, nid, node, g):
    return ((node.inputs[0], np.ascontiguousarray(_expand_reduced(g, node))),)


def _vjp_mean(tape, nid, node, g):
    shape = node.ctx["shape"]
    axis = node.ctx["axis"]
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a % len(shape)] for a in axes]))
    return ((node.inputs[0], _expand_reduced(g, node) / count),)


def _vjp_max(tape, nid, node, g):
    x = tape.values[node.inputs[0]]
    axis = node.ctx["axis"]
    vmax = np.max(x, axis=axis, keepdims=True)
    mask = (x == vmax).astype(np.float64)
    mask /= np.sum(mask, axis=axis, keepdims=True)  # split gradient across ties
    return ((node.inputs[0], _expand_reduced(g, node) * mask),)


def _vjp_exp(tape, nid, node, g):
    return ((node.inputs[0], g * tape.values[nid]),)


def _vjp_log(tape, nid, node, g):
    return ((node.inputs[0], g / tape.values[node.inputs[0]]),)


def _vjp_sqrt(tape, nid, node, g):
    return ((node.inputs[0], g / (2.0 * tape.values[nid])),)


def _vjp_relu(tape, nid, node, g):
    x = tape.values[node.inputs[0]]
    return ((node.inputs[0], g * (x > 0.0)),)


def _vjp_softmax(tape, nid, node, g):
    p = tape.values[nid]
    axis = node.ctx["axis"]
    inner = np.sum(g * p, axis=axis, keepdims=True)
    return ((node.inputs[0], p * (g - inner)),)


def _vjp_scale(tape, nid, node, g):
    return ((node.inputs[0], g * node.ctx["factor"]),)


def _vjp_broadcast(tape, nid, node, g):
    return ((node.inputs[0], _reduce_to(g, node.ctx["shape"])),)


def _vjp_gather(tape, nid, node, g):
    table_shape = tape.values[node.inputs[0]].shape
    out = np.zeros(table_shape, dtype=np.float64)
    np.add.at(out, node.ctx["indices"], g)
    return ((node.inputs[0], out),)

_VJPS: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "sum-over-axis": _vjp_sum,
    "mean-over-axis": _vjp_mean,
    "max-over-axis": _vjp_max,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sqrt": _vjp_sqrt,
    "relu": _vjp_relu,
    "softmax-over-axis": _vjp_softmax,
    "scale": _vjp_scale,
    "broadcast": _vjp_broadcast,
    "gather-rows": _vjp_gather,
}


def backward(output: Tensor, seed=None) -> None:
    """Accumulate gradients of ``output`` into every node's buffer.

    ``output`` must be a scalar unless an explicit ``seed`` array of the
    output's shape is given. Calling backward twice on the same tape
    without :meth:`Tape.reset_grads` is an error.
    """
    tape = output.tape
    if tape._backward_done:
        raise TapeError("backward already ran on this tape; call reset_grads() first")
    if seed is None:
        if output.data.size != 1:
            raise TapeError("backward on a non-scalar output requires an explicit seed")
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = np.ascontiguousarray(seed, dtype=np.float64)
        if seed_arr.shape != output.data.shape:
            raise TapeError(
                f"seed shape {seed_arr.shape} does not match output {output.data.shape}")
    grads = tape.grads
    grads[output.node_id] = seed_arr
    nodes = tape.nodes
    for nid in range(output.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = nodes[nid]
        vjp = _VJPS.get(node.kind)
        if vjp is None:  # leaf or detach: nothing flows upstream
            continue
        for pid, contrib in vjp(tape, nid, node, g):
            if grads[pid] is None:
                grads[pid] = contrib if contrib.shape == tape.values[pid].shape \
                    else np.broadcast_to(contrib, tape.values[pid].shape).copy()
            else:
                grads[pid] = grads[pid] + contrib
    tape._backward_done = True


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must map one Tensor to a scalar Tensor recorded on the same
    tape. Returns the maximum over coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step {step} outside the supported range [1e-6, 1e-3]")
    x0 = np.ascontiguousarray(point.data if isinstance(point, Tensor) else point,
                              dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(y)
    analytic = x.grad
    if analytic is None:
        analytic = np.zeros_like(x0)

    def _eval(arr: np.ndarray) -> float:
        t = Tape()
        return float(f(t.leaf(arr)).data)

    numeric = np.empty_like(x0)
    for idx in np.ndindex(x0.shape):
        hi = x0.copy()
        hi[idx] += step
        lo = x0.copy()
        lo[idx] -= step
        numeric[idx] = (_eval(hi) - _eval(lo)) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(err)) if err.size else 0.0
