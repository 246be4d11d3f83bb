"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op checks shapes up front and rejects non-finite results, so a
numeric blowup surfaces at the op that produced it rather than at the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense float64 array that records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    if any(p.requires_grad for p in parents):
        return Tensor(out, True, _parents=tuple(parents), _backward=backward)
    return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold batch dims into one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match input {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _make(xhat * gain.data, (x, gain), backward, "rms_norm")


# ---------------------------------------------------------------- shape / indexing

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing (basic or integer-array). Repeated indices accumulate."""
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward, "index")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]})")
    return index(weight, ids)


def gather(a: Tensor, idx, axis: int) -> Tensor:
    """Select entries ``idx`` along ``axis`` (row or column gather)."""
    key = [slice(None)] * a.ndim
    key[axis] = np.asarray(idx)
    return index(a, tuple(key))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean cross-entropy over positions where ``loss_mask`` is true.

    ``logits`` has shape (..., V); ``targets`` and ``loss_mask`` have the
    leading shape. Masked-out positions contribute nothing to loss or grad.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if loss_mask is None:
        loss_mask = np.ones(targets.shape, dtype=bool)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: loss_mask {loss_mask.shape} vs targets {targets.shape}")
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: loss_mask selects no positions")
    V = logits.shape[-1]
    x = logits.data.reshape(-1, V)
    t = np.where(loss_mask, targets, 0).reshape(-1)
    w = loss_mask.reshape(-1).astype(DTYPE)
    if t.max() >= V or t.min() < 0:
        raise ShapeError(f"cross_entropy: target id outside [0, {V})")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(len(t)), t]
    loss = float((nll * w).sum() / count)

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- backward pass

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("backward: loss is not finite")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaves own their buffer; sibling parents may share g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from the current ``params`` data on every
    call. Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    if not isinstance(params, Mapping):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: f is not finite")
    backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"grad_check: f is not finite near {name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tol)


def check_primitives(seed: int = 0, eps: float = 1e-5, tol: float = 1e-6) -> dict[str, GradCheckReport]:
    """Finite-difference check of every primitive on random inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)

    def param(*shape, name="x"):
        return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True, name=name)

    # fixed projection so each check reduces to a well-conditioned scalar
    def proj(t):
        w = np.random.default_rng(seed + 1).uniform(-1, 1, size=t.shape)
        return sum_(mul(t, w))

    a, b = param(3, 4, name="a"), param(4, 5, name="b")
    c, d = param(2, 3, 4, name="c"), param(4, name="d")
    e = param(6, 3, name="e")
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    targets = np.array([[1, 0, 2, 3], [4, 4, 0, 1]])
    lmask = np.array([[True, False, True, True], [False, True, True, False]])
    logits = param(2, 4, 5, name="logits")
    cases = {
        "matmul": (lambda: proj(matmul(a, b)), [a, b]),
        "batched_matmul": (lambda: proj(matmul(c, b)), [c, b]),
        "add": (lambda: proj(add(c, d)), [c, d]),
        "mul": (lambda: proj(mul(c, d)), [c, d]),
        "scalar_broadcast": (lambda: proj(mul(c, 1.7)), [c]),
        "sigmoid": (lambda: proj(sigmoid(c)), [c]),
        "silu": (lambda: proj(silu(c)), [c]),
        "softmax": (lambda: proj(softmax(c)), [c]),
        "rms_norm": (lambda: proj(rms_norm(c, d)), [c, d]),
        "embedding": (lambda: proj(embedding(e, ids)), [e]),
        "gather_rows": (lambda: proj(gather(e, [4, 0, 4], axis=0)), [e]),
        "gather_cols": (lambda: proj(gather(b, [3, 1], axis=1)), [b]),
        "concat": (lambda: proj(concat([a, transpose(b)[:3]], axis=1)), [a, b]),
        "sum": (lambda: proj(sum_(c, axis=1)), [c]),
        "mean": (lambda: proj(mean(c, axis=(0, 2))), [c]),
        "reshape_transpose": (lambda: proj(transpose(reshape(c, (4, 6)))), [c]),
        "cross_entropy": (lambda: cross_entropy(logits, targets, lmask), [logits]),
    }
    return {name: grad_check(fn, ps, eps=eps, tol=tol) for name, (fn, ps) in cases.items()}
