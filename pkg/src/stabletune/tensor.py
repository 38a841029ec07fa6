"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient.  A reverse sweep over the tape returns a
fresh gradient map every time, so calling :func:`backward` twice on the same
tape gives the same answer.

Broadcasting is limited to scalar-vs-tensor and equal shapes.  The two places a
transformer genuinely needs more (bias rows and attention masks) have their
own ops: :func:`add_bias` and the ``mask`` argument of :func:`softmax`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "relu",
    "gelu",
    "add_bias",
    "reshape",
    "transpose",
    "index",
    "embedding",
    "softmax",
    "layer_norm",
    "dropout",
    "softmax_cross_entropy",
    "mse",
    "sum_all",
    "mean_all",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order and swept in exact reverse by
    :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf that requires grad.

        Leaves that require grad but do not influence ``loss`` get zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced: set[int] = set()
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            produced.add(id(node.out))
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.grad_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if not self.nodes and loss.requires_grad:
            leaves[id(loss)] = loss
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Like :meth:`backward` but keyed by the names in ``params``."""
        by_tensor = self.backward(loss)
        return {
            name: by_tensor.get(t, np.zeros_like(t.data)) for name, t in params.items()
        }


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            return {loss: np.ones_like(loss.data)}
        return {}
    return loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        stack = _tape_stack()
        if stack:
            tape = stack[-1]
            tape.nodes.append(_Node(out, inputs, grad_fn))
            out._tape = tape
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes.  ``b`` is either a plain matrix shared
    across the batch or has exactly the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _reduce_to(g * bd, a) if a.requires_grad else None
        gb = _reduce_to(g * ad, b) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU, as used in BERT's feed-forward blocks."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _emit(y, (a,), grad_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
}


def elementwise(a, b=None, kind: str = "add") -> Tensor:
    """Dispatch by name; ``scale`` takes a plain number as ``b``."""
    if kind == "scale":
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("tanh", "relu", "gelu"):
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    return fn(a, b)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., d] + bias[d]``; the one row-broadcast the model needs."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias {bias.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def grad_fn(g):
        return g, (g.sum(axis=lead) if bias.requires_grad else None)

    return _emit(x.data + bias.data, (x, bias), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),)
    )


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    """``x[key]`` for any numpy index; repeated indices accumulate."""
    x = _as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit(np.array(x.data[key]), (x,), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` are integer constants."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def grad_fn(g):
        flat = g.reshape(-1, dim)
        gt = np.zeros((vocab, dim))
        # bincount per column beats np.add.at by a wide margin here
        idx = ids.ravel()
        for j in range(dim):
            gt[:, j] = np.bincount(idx, weights=flat[:, j], minlength=vocab)
        return (gt,)

    return _emit(table.data[ids], (table,), grad_fn)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is an additive constant broadcast against ``x`` (use large
    negative values to exclude positions).
    """
    x = _as_tensor(x)
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def grad_fn(g):
        gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _emit(out, (x, gain, bias), grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero w.p. ``p`` and rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def softmax_cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), grad_fn)


def mse(pred: Tensor, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _emit(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (diff * (2.0 * float(g) / n),))
