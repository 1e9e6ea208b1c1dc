"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a node in a dynamic graph when gradients are
requested; ``Tensor.backward`` replays the graph in reverse topological
order, accumulating gradients into every reachable tensor with
``requires_grad=True``. Gradients add across uses, so call ``zero_grad``
before each optimization step.

The engine is deliberately small: dense numpy arrays, float64 only,
single-threaded, no views into the tape. ``CustomGradientNode`` lets
callers install an arbitrary backward rule for a forward computation,
which is how hard (non-differentiable) selections receive surrogate
gradients elsewhere in this package.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "CustomGradientNode",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "linear",
    "softmax",
    "top_k_keep",
    "top_k_mask",
    "cross_entropy",
    "embedding",
    "gelu",
    "relu",
    "tsum",
    "tmean",
    "finite_difference_check",
    "FiniteDifferenceReport",
]


class ShapeError(ValueError):
    """Operands do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward value that must be finite contains NaN or infinity."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor.

        Raises ``ValueError`` if the tensor is not a scalar. Each node's
        backward rule runs exactly once per call.
        """
        if self.values.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {self.values.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.values))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swap_last_axes(self):
        return swap_last_axes(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_values(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise and structural ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    values = _broadcast_values("add", a, b, np.add)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(values, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _node(-a.values, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    values = _broadcast_values("mul", a, b, np.multiply)
    av, bv = a.values, b.values

    def backward(g):
        a._accumulate(_unbroadcast(g * bv, a.shape))
        b._accumulate(_unbroadcast(g * av, b.shape))

    return _node(values, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    values = _broadcast_values("div", a, b, np.divide)
    av, bv = a.values, b.values

    def backward(g):
        a._accumulate(_unbroadcast(g / bv, a.shape))
        b._accumulate(_unbroadcast(-g * av / (bv * bv), b.shape))

    return _node(values, (a, b), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    av = a.values

    def backward(g):
        a._accumulate(g * exponent * np.power(av, exponent - 1.0))

    return _node(np.power(av, exponent), (a,), backward)


def texp(a: Tensor) -> Tensor:
    values = np.exp(a.values)

    def backward(g):
        a._accumulate(g * values)

    return _node(values, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    av = a.values

    def backward(g):
        a._accumulate(g / av)

    return _node(np.log(av), (a,), backward)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def backward(g):
        a._accumulate(g * (av > 0.0))

    return _node(np.maximum(av, 0.0), (a,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    av = a.values
    cdf = 0.5 * (1.0 + erf(av / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
        a._accumulate(g * (cdf + av * pdf))

    return _node(av * cdf, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        values = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _node(values, (a,), backward)


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last_axes: need ndim >= 2, got shape {a.shape}")

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.values, -1, -2).copy(), (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _node(np.transpose(a.values, axes).copy(), (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    values = a.values[idx]

    def backward(g):
        buf = np.zeros_like(a.values)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _node(values.copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _node(values, tuple(tensors), backward)


# -- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    values = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, shape))

    return _node(values, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    values = a.values.mean(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, shape) / count)

    return _node(values, (a,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need ndim >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    av, bv = a.values, b.values

    def backward(g):
        a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape))

    return _node(values, (a, b), backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a weight matrix stored as (out_dim, in_dim): returns x @ w.T."""
    if w.ndim != 2 or x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    values = np.matmul(x.values, w.values.T)
    xv, wv = x.values, w.values
    out_dim, in_dim = w.shape

    def backward(g):
        x._accumulate(np.matmul(g, wv))
        w._accumulate(g.reshape(-1, out_dim).T @ xv.reshape(-1, in_dim))

    return _node(values, (x, w), backward)


# -- softmax family ------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    av = a.values
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(values * (g - (g * values).sum(axis=-1, keepdims=True)))

    return _node(values, (a,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer targets under softmax(logits).

    ``logits`` has shape (..., vocab); ``targets`` matches the leading
    shape with integer class ids. Returns a scalar.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"cross_entropy: target id outside [0, {vocab})")
    flat = logits.values.reshape(-1, vocab)
    ids = targets.reshape(-1).astype(np.int64)
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    losses = lse - flat[np.arange(n), ids]
    value = losses.mean()
    logits_shape = logits.shape

    def backward(g):
        probs = np.exp(flat - lse[:, None])
        probs[np.arange(n), ids] -= 1.0
        logits._accumulate((float(g) / n) * probs.reshape(logits_shape))

    return _node(np.asarray(value), (logits,), backward)


def top_k_mask(values: np.ndarray, k: int) -> np.ndarray:
    """0/1 indicator of the k largest entries along the last axis.

    Ties break toward the lowest index (stable sort on descending value).
    """
    size = values.shape[-1]
    if not 1 <= k <= size:
        raise ShapeError(f"top_k: k={k} outside [1, {size}]")
    order = np.argsort(-values, axis=-1, kind="stable")
    mask = np.zeros_like(values)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def top_k_keep(a: Tensor, k: int) -> Tensor:
    """Zero all but the k largest entries of the last axis.

    The selection pattern is treated as a constant; gradients flow only
    through the kept entries.
    """
    mask = top_k_mask(a.values, k)

    def backward(g):
        a._accumulate(g * mask)

    return _node(a.values * mask, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradients into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id outside table of {table.shape[0]} rows")
    values = table.values[ids]
    dim = table.shape[1]

    def backward(g):
        buf = np.zeros_like(table.values)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, dim))
        table._accumulate(buf)

    return _node(values, (table,), backward)


# -- custom backward rules ----------------------------------------------


class CustomGradientNode:
    """Pairs a forward function with a hand-written backward rule.

    ``forward_fn`` maps input arrays to an output array. ``backward_fn``
    maps the upstream gradient to one gradient per input (``None`` to
    skip an input). The backward rule is used verbatim and runs exactly
    once per backward pass.
    """

    def __init__(self, forward_fn: Callable[..., np.ndarray],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn

    def __call__(self, *inputs: Tensor) -> Tensor:
        values = np.asarray(self.forward_fn(*[t.values for t in inputs]),
                            dtype=np.float64)
        backward_fn = self.backward_fn

        def backward(g):
            grads = backward_fn(g)
            if len(grads) != len(inputs):
                raise ValueError(
                    f"custom backward returned {len(grads)} gradients for "
                    f"{len(inputs)} inputs"
                )
            for t, gi in zip(inputs, grads):
                if gi is not None:
                    t._accumulate(np.broadcast_to(np.asarray(gi, dtype=np.float64),
                                                  t.shape))

        return _node(values, inputs, backward)


# -- gradient checking ----------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    checked: int
    excluded: int
    max_rel_error: float
    passed: bool


@dataclass
class FiniteDifferenceReport:
    tol: float
    step: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    signature_fn: Callable[[], object] | None = None,
    denom_floor: float = 1e-4,
) -> FiniteDifferenceReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar. For every parameter (optionally subsampled to
    ``samples_per_param`` entries), the relative error
    ``|ad - fd| / max(|ad|, |fd|, denom_floor)`` is reported against
    ``tol``. If ``signature_fn`` is given, it is evaluated at both
    perturbed points and entries whose signature changes (a hard
    selection boundary) are excluded as non-differentiable.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.values).all():
        raise NonFiniteError("finite_difference_check: loss is not finite")
    loss.backward()
    autodiff = {
        name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    rng = rng or np.random.default_rng(0)
    report = FiniteDifferenceReport(tol=tol, step=step)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n = flat.size
        if samples_per_param is not None and samples_per_param < n:
            indices = rng.choice(n, size=samples_per_param, replace=False)
        else:
            indices = np.arange(n)
        max_err = 0.0
        excluded = 0
        checked = 0
        with no_grad():
            for i in indices:
                original = flat[i]
                flat[i] = original + step
                sig_hi = signature_fn() if signature_fn else None
                hi = float(f().values)
                flat[i] = original - step
                sig_lo = signature_fn() if signature_fn else None
                lo = float(f().values)
                flat[i] = original
                if signature_fn is not None and sig_hi != sig_lo:
                    excluded += 1
                    continue
                fd = (hi - lo) / (2.0 * step)
                ad = autodiff[name].reshape(-1)[i]
                err = abs(ad - fd) / max(abs(ad), abs(fd), denom_floor)
                max_err = max(max_err, err)
                checked += 1
        report.params.append(
            ParamCheck(name=name, checked=checked, excluded=excluded,
                       max_rel_error=max_err, passed=max_err <= tol)
        )
    return report
