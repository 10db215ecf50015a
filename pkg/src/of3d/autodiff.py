"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every forward call records its inputs and a backward
closure on the produced tensor, and ``backward()`` replays the recording in
reverse topological order, visiting each node exactly once. Tensors are
treated as immutable once produced; parameters are the only values updated
in place, and only between steps by the optimizer.

All data is float64. Every forward operation checks its output for
non-finite entries and fails loudly instead of propagating NaNs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray

# Additive mask value for attention; exp() underflows to exactly 0.0 after
# max-subtraction, while the array itself stays finite.
NEG_MASK = -1e30


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the backward rule that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array, ...]] | None = None

    # -- construction helpers -------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # -- graph traversal ------------------------------------------------------

    def gradients(self) -> dict["Tensor", Array]:
        """Gradients of this scalar w.r.t. every requires_grad leaf.

        Pure: does not touch ``.grad`` on any tensor, so independent graphs
        can be differentiated concurrently and reduced in a fixed order.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = _topo_order(self)
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        leaf_grads: dict[Tensor, Array] = {}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    prev = leaf_grads.get(node)
                    leaf_grads[node] = g if prev is None else prev + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaf_grads

    def backward(self) -> dict["Tensor", Array]:
        """Accumulate gradients into ``.grad`` of every requires_grad leaf.

        Repeated calls without ``zero_grad`` keep accumulating. Returns the
        gradient table of this call.
        """
        table = self.gradients()
        for tensor, g in table.items():
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        return table

    # -- operator sugar ---------------------------------------------------

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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"T expects a 2-d tensor, got shape {self.shape}")
        return transpose(self, (1, 0))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order from the root, iterative to spare the stack."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by '{op}'")


def _make(
    data: Array,
    parents: tuple[Tensor, ...],
    backward: Callable[[Array], tuple[Array, ...]],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    return _make(
        a.data**e,
        (a,),
        lambda g: (g * e * a.data ** (e - 1.0),),
        "power",
    )


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, numerically stable on both tails."""
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed through strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward, "concat")


def take(a, index) -> Tensor:
    """Basic and integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    if isinstance(index, tuple):
        index = tuple(
            np.asarray(i) if isinstance(i, (list, np.ndarray)) else i for i in index
        )
    elif isinstance(index, (list, np.ndarray)):
        index = np.asarray(index)
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(data, (a,), backward, "take")


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for 2-d operands or stacks of matrices (3-d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects 2-d or 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward, "matmul")


# -- normalizations ---------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along one axis, stabilized by max-subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm requires eps > 0")
    a = as_tensor(a)
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gain), bias)


# -- aggregation primitives used by the point encoder / pooling ---------------


def segment_mean(a, segment_of: Array, num_segments: int) -> Tensor:
    """Row-mean of ``a`` grouped by segment index.

    ``segment_of`` maps each of the N rows to [0, num_segments); every
    segment must be non-empty.
    """
    a = as_tensor(a)
    seg = np.asarray(segment_of, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError(
            f"segment map shape {seg.shape} does not match rows of {a.shape}"
        )
    counts = np.bincount(seg, minlength=num_segments)
    if np.any(counts == 0):
        raise ContractError("segment_mean requires every segment to be non-empty")
    sums = np.zeros((num_segments, a.shape[1]))
    np.add.at(sums, seg, a.data)
    out = sums / counts[:, None]

    def backward(g):
        return ((g / counts[:, None])[seg],)

    return _make(out, (a,), backward, "segment_mean")


def gather_mean(a, flat_index: Array, offsets: Array) -> Tensor:
    """Mean of gathered rows per output row.

    Output row i averages ``a[flat_index[offsets[i]:offsets[i+1]]]``; every
    group must be non-empty.
    """
    a = as_tensor(a)
    flat = np.asarray(flat_index, dtype=np.int64)
    offs = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offs)
    if np.any(counts <= 0):
        raise ContractError("gather_mean requires non-empty groups")
    gathered = a.data[flat]
    sums = np.add.reduceat(gathered, offs[:-1], axis=0)
    out = sums / counts[:, None]
    rows = np.repeat(np.arange(len(counts)), counts)

    def backward(g):
        contrib = g[rows] / counts[rows, None]
        ga = np.zeros_like(a.data)
        np.add.at(ga, flat, contrib)
        return (ga,)

    return _make(out, (a,), backward, "gather_mean")


# -- gradient checking -------------------------------------------------------


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` must map the given tensors to a scalar tensor and be rebuildable
    (it is re-evaluated with perturbed inputs). The relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    inputs = list(inputs)
    table = f(*inputs).gradients()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = table.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
