"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: each operation records its parent tensors
together with a vector-Jacobian closure.  ``GradTape`` linearizes the graph
below a scalar loss in reverse topological order, so every recorded node is
visited exactly once during the backward pass.

The module also hosts the numerically safe probability primitives (softmax,
KL divergence, cross-entropy) that the estimators reuse on stored
prediction matrices.  ``EPS_Q`` is the single probability floor shared by
all KL consumers in the package so live evaluation and stored matrices
agree bit-wise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

EPS_Q = 1e-12


class NumericInputError(ValueError):
    """An operation received non-finite or malformed numeric input."""


class NonFiniteLossError(ArithmeticError):
    """A forward pass produced a non-finite loss value."""


# ---------------------------------------------------------------------------
# Tensor graph
# ---------------------------------------------------------------------------

class Tensor:
    """Graph node: a float64 ndarray plus recorded parents.

    ``parents`` is a tuple of (tensor, vjp) pairs where ``vjp`` maps the
    output cotangent to this parent's cotangent contribution.
    """

    __slots__ = ("data", "grad", "parents")

    def __init__(self, data, parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # operator sugar; non-tensor operands become constant leaves
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a cotangent back down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data + b.data,
        (
            (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.data.shape: _unbroadcast(g, sb)),
        ),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data - b.data,
        (
            (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.data.shape: _unbroadcast(-g, sb)),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data * b.data,
        (
            (a, lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa)),
            (b, lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb)),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, ((a, lambda g: g * c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.data.ndim, b.data.ndim
    out = a.data @ b.data
    if na == 2 and nb == 2:
        vjps = (
            (a, lambda g, bd=b.data: g @ bd.T),
            (b, lambda g, ad=a.data: ad.T @ g),
        )
    elif na == 2 and nb == 1:
        vjps = (
            (a, lambda g, bd=b.data: np.outer(g, bd)),
            (b, lambda g, ad=a.data: ad.T @ g),
        )
    elif na == 1 and nb == 2:
        vjps = (
            (a, lambda g, bd=b.data: bd @ g),
            (b, lambda g, ad=a.data: np.outer(ad, g)),
        )
    elif na == 1 and nb == 1:
        vjps = (
            (a, lambda g, bd=b.data: g * bd),
            (b, lambda g, ad=a.data: g * ad),
        )
    else:
        raise NumericInputError(f"matmul supports 1-D/2-D operands, got {na}-D @ {nb}-D")
    return Tensor(out, vjps)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), ((a, lambda g, m=mask: g * m),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor(t, ((a, lambda g, t=t: g * (1.0 - t * t)),))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis (max-subtracted)."""
    z = a.data
    m = z.max(axis=-1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    out = zs - lse

    def vjp(g, out=out):
        return g - np.exp(out) * g.sum(axis=-1, keepdims=True)

    return Tensor(out, ((a, vjp),))


def tsum(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        return Tensor(a.data.sum(), ((a, lambda g, s=a.data.shape: np.broadcast_to(g, s)),))

    def vjp(g, axis=axis, shape=a.data.shape):
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return Tensor(a.data.sum(axis=axis), ((a, vjp),))


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


class GradTape:
    """Reverse-topological schedule of the graph below a scalar root."""

    def __init__(self, root: Tensor):
        if root.data.shape != ():
            raise NumericInputError("backward root must be a scalar tensor")
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
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.root = root
        self.nodes = order  # leaves first, root last

    def backward(self) -> None:
        for node in self.nodes:
            node.grad = None
        self.root.grad = np.ones(())
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass
class ParamVector:
    """Flat float64 parameter array with a named segment table.

    Segments tile the flat array exactly, in layout order, so checkpoints
    round-trip bit-exactly.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.layout = tuple((name, tuple(shape)) for name, shape in self.layout)
        total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in self.layout)
        if self.values.ndim != 1 or total != self.values.size:
            raise NumericInputError(
                f"layout covers {total} values but array has {self.values.size}"
            )

    def segment(self, name: str) -> np.ndarray:
        """Reshaped view of one named segment (shares storage)."""
        offset = 0
        for seg_name, shape in self.layout:
            n = int(np.prod(shape, dtype=np.int64))
            if seg_name == name:
                return self.values[offset : offset + n].reshape(shape)
            offset += n
        raise KeyError(name)

    def segments(self) -> Iterator[tuple[str, np.ndarray]]:
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape, dtype=np.int64))
            yield name, self.values[offset : offset + n].reshape(shape)
            offset += n

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise NumericInputError("parameter layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def scaled(self, c: float) -> "ParamVector":
        return ParamVector(self.values * float(c), self.layout)

    def l2(self) -> float:
        return float(np.linalg.norm(self.values))

    def linf(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @staticmethod
    def from_segments(layout: Layout, parts: Mapping[str, np.ndarray]) -> "ParamVector":
        flat = np.concatenate(
            [np.asarray(parts[name], dtype=np.float64).reshape(-1) for name, _ in layout]
        )
        return ParamVector(flat, layout)


LossFn = Callable[[dict[str, Tensor]], Tensor]


def gradient(loss_fn: LossFn, at: ParamVector) -> ParamVector:
    """Exact reverse-mode gradient of a scalar loss at ``at``.

    ``loss_fn`` receives one leaf Tensor per layout segment and must return
    a scalar Tensor built from this module's operations.
    """
    leaves = {name: Tensor(seg.copy()) for name, seg in at.segments()}
    loss = loss_fn(leaves)
    if loss.data.shape != ():
        raise NumericInputError("loss function must return a scalar")
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"non-finite loss value {float(loss.data)!r}")
    tape = GradTape(loss)
    tape.backward()
    out = np.zeros_like(at.values)
    offset = 0
    for name, shape in at.layout:
        n = int(np.prod(shape, dtype=np.int64))
        g = leaves[name].grad
        if g is not None:
            out[offset : offset + n] = np.asarray(g).reshape(-1)
        offset += n
    return ParamVector(out, at.layout)


def hvp(loss_fn: LossFn, at: ParamVector, v: ParamVector) -> ParamVector:
    """Hessian-vector product by central differences of exact gradients.

    Step size is relative to both the parameter scale and the direction
    scale: eps = 1e-4 * (1 + max|theta|) / max|v|.
    """
    at._check(v)
    vmax = v.linf()
    if vmax == 0.0:
        raise NumericInputError("hvp direction vector is zero")
    eps = 1e-4 * (1.0 + at.linf()) / vmax
    g_plus = gradient(loss_fn, at + v.scaled(eps))
    g_minus = gradient(loss_fn, at - v.scaled(eps))
    return (g_plus - g_minus).scaled(1.0 / (2.0 * eps))


# ---------------------------------------------------------------------------
# Probability primitives (plain ndarray, shared by training and estimators)
# ---------------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericInputError("softmax input must be finite")
    if z.shape[-1] < 2:
        raise NumericInputError("softmax needs at least two logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise NumericInputError(f"{name} has negative entries")
    s = p.sum()
    if abs(s - 1.0) > 1e-9:
        raise NumericInputError(f"{name} sums to {s!r}, not 1 within 1e-9")


def kl_div(p, q) -> float:
    """KL(p || q) in nats with q floored at EPS_Q and 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise NumericInputError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    return float(kl_rows(p, q))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL over the last axis; same clamp and term order as kl_div."""
    terms = np.zeros_like(p)
    mask = p > 0
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], EPS_Q)))
    return terms.sum(axis=-1)


def cross_entropy(logits, label: int, smoothing: float = 0.0) -> float:
    """Label-smoothed cross-entropy of one logit vector in nats."""
    z = np.asarray(logits, dtype=np.float64)
    num_classes = z.shape[-1]
    if not 0 <= label < num_classes:
        raise NumericInputError(f"label {label} out of range for {num_classes} classes")
    if not 0.0 <= smoothing < 1.0:
        raise NumericInputError("smoothing must lie in [0, 1)")
    logp = log_softmax_rows(z)
    target = np.full(num_classes, smoothing / num_classes)
    target[label] += 1.0 - smoothing
    return float(-(target * logp).sum())


def smoothed_targets(labels: Sequence[int], num_classes: int, smoothing: float) -> np.ndarray:
    """Batch of label-smoothed one-hot target rows."""
    y = np.asarray(labels, dtype=np.int64)
    out = np.full((y.size, num_classes), smoothing / num_classes)
    out[np.arange(y.size), y] += 1.0 - smoothing
    return out
