"""Reverse-mode automatic differentiation over dense float64 arrays.

Every trainable component in this package (encoders, graph layers, heads)
builds its forward pass from the primitives here, then `backward` walks the
resulting graph once per optimization step.  Graphs are define-by-run and
rebuilt every step, so a node's lifetime is a single step; parameter leaves
live in a :class:`ParamStore` and persist across steps.

All values are 64-bit floats and are checked finite after every primitive:
a NaN or Inf anywhere is treated as an error state, not a value.
"""

from __future__ import annotations

import itertools
import math
import struct
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericError

Vjp = Callable[[np.ndarray], np.ndarray]

_node_counter = itertools.count()


class Tensor:
    """One node of the computation graph: a value plus backward plumbing.

    `parents` holds `(parent, vjp)` pairs where `vjp` maps the gradient at
    this node to the gradient contribution for that parent.  Nodes carry a
    creation counter; define-by-run construction makes it a topological order.
    """

    __slots__ = ("value", "grad", "op_kind", "parents", "uid")

    def __init__(self, value, op_kind: str = "leaf",
                 parents: tuple[tuple["Tensor", Vjp], ...] = ()):
        if type(value) is np.ndarray and value.dtype == np.float64:
            arr = value
        else:
            arr = np.asarray(value, dtype=np.float64)
        # a non-finite sum implies a non-finite entry; the converse can fail
        # only at magnitudes (~1e308) that are already on the edge of overflow
        if not math.isfinite(arr.sum()):
            if not np.isfinite(arr).all():
                raise NumericError(f"op '{op_kind}' produced non-finite values")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.op_kind = op_kind
        self.parents = parents
        self.uid = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op_kind!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return subtract(self, _wrap(other))

    def __rsub__(self, other):
        return subtract(_wrap(other), self)

    def __mul__(self, other):
        return multiply(self, _wrap(other))

    def __rmul__(self, other):
        return multiply(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(value) -> Tensor:
    """Graph leaf holding a non-trainable value."""
    return Tensor(value, op_kind="const")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    return Tensor(value, "add", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise DimensionError(f"subtract: {a.shape} vs {b.shape}") from exc
    return Tensor(value, "subtract", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise DimensionError(f"multiply: {a.shape} vs {b.shape}") from exc
    av, bv = a.value, b.value
    return Tensor(value, "elementwise-multiply", (
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Tensor(av @ bv, "matmul", (
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0
    return Tensor(np.where(mask, x.value, 0.0), "relu",
                  ((x, lambda g: g * mask),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: saturates instead of overflowing, and it is a single ufunc
    out = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return Tensor(out, "sigmoid", ((x, lambda g: g * out * (1.0 - out)),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return Tensor(out, "tanh", ((x, lambda g: g * (1.0 - out * out)),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    # the Tensor constructor rejects the Inf an overflow produces
    return Tensor(out, "exp", ((x, lambda g: g * out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.value <= 0.0):
        raise NumericError("log of a non-positive value")
    xv = x.value
    return Tensor(np.log(xv), "log", ((x, lambda g: g / xv),))


def sum_reduce(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    value = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor(value, "sum-reduce", ((x, vjp),))


def mean_reduce(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean-reduce over an empty axis")
    value = x.value.mean(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, shape).copy()

    return Tensor(value, "mean-reduce", ((x, vjp),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    value = np.concatenate([p.value for p in parts], axis=axis)
    parent_specs = []
    offset = 0
    for p in parts:
        n = p.shape[axis]
        sl = [slice(None)] * value.ndim
        sl[axis] = slice(offset, offset + n)
        sl = tuple(sl)
        parent_specs.append((p, lambda g, sl=sl: g[sl]))
        offset += n
    return Tensor(value, "concat", tuple(parent_specs))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.value.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    value = x.value[sl]
    shape = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros(shape)
        out[sl] = g
        return out

    return Tensor(value, "slice", ((x, vjp),))


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows (axis 0) by an index list; dual of `segment_sum`."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take-rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("take-rows index out of range")
    shape = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Tensor(x.value[idx], "take-rows", ((x, vjp),))


def segment_sum(x: Tensor, indices, num_segments: int) -> Tensor:
    """Sum rows of `x` into `num_segments` destination rows given an index list."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size != x.shape[0]:
        raise DimensionError("segment-sum needs one destination index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= num_segments):
        raise DimensionError("segment-sum index out of range")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, idx, x.value)
    return Tensor(out, "segment-sum", ((x, lambda g: g[idx]),))


def squared_l2(x: Tensor) -> Tensor:
    """Scalar sum of squares of all entries."""
    xv = x.value
    return Tensor(np.sum(xv * xv), "squared-L2", ((x, lambda g: 2.0 * g * xv),))


def transpose(x: Tensor) -> Tensor:
    if x.value.ndim != 2:
        raise DimensionError("transpose expects a 2-D operand")
    return Tensor(x.value.T.copy(), "transpose", ((x, lambda g: g.T),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {shape}") from exc
    return Tensor(value, "reshape", ((x, lambda g: g.reshape(old)),))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "elementwise-multiply": multiply,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum-reduce": sum_reduce,
    "mean-reduce": mean_reduce,
    "concat": concat,
    "slice": slice_axis,
    "segment-sum": segment_sum,
    "squared-L2": squared_l2,
    "take-rows": take_rows,
    "transpose": transpose,
    "reshape": reshape,
}


def apply(op_kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name and append the resulting node to the graph."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive '{op_kind}'") from None
    return fn(*operands, **kwargs)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias as one fused node, the workhorse of every layer."""
    if x.value.ndim != 2 or weight.value.ndim != 2:
        raise DimensionError("affine expects 2-D input and weight")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"affine: {x.shape} @ {weight.shape} + {bias.shape}")
    xv, wv = x.value, weight.value
    return Tensor(xv @ wv + bias.value, "affine", (
        (x, lambda g: g @ wv.T),
        (weight, lambda g: xv.T @ g),
        (bias, lambda g: g.sum(axis=0)),
    ))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root`, sorted children-before-parents.

    Creation order is a topological order for a define-by-run graph, so a
    plain reachability sweep plus a sort on the creation counter suffices.
    """
    nodes = [root]
    seen = {id(root)}
    seen_add = seen.add
    stack = [root]
    while stack:
        for parent, _ in stack.pop().parents:
            key = id(parent)
            if key not in seen:
                seen_add(key)
                nodes.append(parent)
                stack.append(parent)
    nodes.sort(key=lambda n: n.uid, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every node reachable from a scalar loss.

    Grads of nodes in the graph are reset first, so repeated calls within a
    step do not accumulate.  Leaves not reachable from `loss` keep grad None.
    """
    if loss.size != 1:
        raise ContractError("backward expects a scalar-shaped loss")
    order = _reachable(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in order:
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------------------
# parameters + Adam
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable parameters plus per-parameter Adam moment state.

    Names are unique and shapes are immutable after creation.  Parameters are
    graph leaves; reuse the same Tensor objects when rebuilding the graph each
    step so `backward` deposits grads where the optimizer can find them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._moments: dict[str, list] = {}  # name -> [m, v, t]

    def create(self, name: str, shape, rng: np.random.Generator | None = None,
               init: str = "xavier") -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter '{name}'")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "xavier":
            if rng is None:
                raise ContractError("xavier init requires an rng")
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            value = rng.normal(0.0, scale, size=shape)
        else:
            raise ContractError(f"unknown init '{init}'")
        param = Tensor(value, op_kind="param")
        self._params[name] = param
        self._moments[name] = [np.zeros(shape), np.zeros(shape), 0]
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter '{name}' in checkpoint")
            param = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != param.value.shape:
                raise ContractError(
                    f"shape mismatch for '{name}': "
                    f"{arr.shape} vs {param.value.shape}")
            param.value = arr.copy()

    def grad_map(self) -> dict[str, np.ndarray]:
        """Current gradients, with zeros for parameters the loss never reached."""
        out = {}
        for name, p in self._params.items():
            out[name] = np.zeros_like(p.value) if p.grad is None else p.grad
        return out

    def adam_step(self, grads: dict[str, np.ndarray] | None = None, *,
                  lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                  eps: float = 1e-8, prefix: str | None = None) -> None:
        """Apply one Adam update.

        `grads` defaults to the gradients deposited by the last `backward`.
        `prefix` restricts the update to parameters whose name starts with it
        (used to freeze everything else during stage-2 training).
        """
        b1, b2 = betas
        for name, param in self._params.items():
            if prefix is not None and not name.startswith(prefix):
                continue
            if grads is not None:
                g = grads.get(name)
            else:
                g = param.grad
            if g is None:
                g = np.zeros_like(param.value)
            g = np.asarray(g, dtype=np.float64)
            if not math.isfinite(g.sum()) and not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            state = self._moments[name]
            m, v, t = state
            t += 1
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            denom = np.sqrt(v / (1.0 - b2 ** t))
            denom += eps
            update = m / denom
            update *= lr / (1.0 - b1 ** t)
            # safe to mutate: the previous step's graph is dead by now
            param.value = param.value - update
            state[2] = t


def sgd_adam_step(params: ParamStore, grads, learning_rate=1e-3,
                  betas=(0.9, 0.999), epsilon=1e-8) -> ParamStore:
    """Functional spelling of :meth:`ParamStore.adam_step`."""
    params.adam_step(grads, lr=learning_rate, betas=betas, eps=epsilon)
    return params


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------
#
# magic "PTPCKPT", u32 version, u32 provenance-hash length + utf-8 hash
# (version >= 2 only), u32 parameter count, then per parameter: u32 name
# length + utf-8 name, u32 ndim, u32 dims, raw little-endian float64 data.
# Round-trips are bit-exact.

CKPT_MAGIC = b"PTPCKPT"
CKPT_VERSION = 2


def save_checkpoint(path, values: dict[str, np.ndarray] | ParamStore,
                    provenance_hash: str = "") -> None:
    if isinstance(values, ParamStore):
        values = values.values()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        hash_bytes = provenance_hash.encode("utf-8")
        fh.write(struct.pack("<I", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(values)))
        for name in sorted(values):
            arr = np.ascontiguousarray(values[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint; returns (values, provenance_hash)."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version not in (1, 2):
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    provenance = ""
    if version >= 2:
        (hash_len,) = struct.unpack("<I", take(4))
        provenance = take(hash_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8")
        values[name] = data.reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return values, provenance
