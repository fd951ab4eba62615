"""Dense-tensor numerics with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and remembers how it was produced;
calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that
requires them. Ops are pure functions of their inputs, so two calls with the
same arguments build identical values and identical graphs.

Conventions:

* float32 is the working precision for training; gradient checks run the
  same code at float64.
* Integer data (token ids, targets) travels as plain numpy arrays, never as
  Tensors; only floating-point values participate in differentiation.
* Attention masks are additive: 0 where attending is allowed, -inf where
  forbidden. ``softmax_rows`` maps -inf to an exact 0 probability.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericError

_INV_SQRT2PI_COEF = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Rng:
    """Seedable deterministic random stream (PCG64 underneath).

    Identical seeds produce identical streams on every platform. Derived
    streams (for per-sample work) come from :meth:`derived`, which folds the
    extra indices into the seed material instead of perturbing arithmetic on
    the seed value.
    """

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    @classmethod
    def derived(cls, seed: int, *indices: int) -> "Rng":
        rng = cls.__new__(cls)
        rng._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed, *indices)))
        )
        return rng

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def geometric(self, p: float, size=None):
        return self._gen.geometric(p, size=size)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar, then release the recorded graph.

        Each graph supports one backward pass: the op closures pin every
        intermediate activation, so the links are cleared afterwards to free
        that memory immediately instead of waiting on the cycle collector.
        """
        if self.data.size != 1:
            raise ConfigurationError(
                f"backward needs a scalar, got shape {self.data.shape}"
            )
        # iterative topological sort; graphs are deep for stacked layers
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn()
        for node in order:
            node._parents = ()
            node._backward_fn = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, optionally batched over identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ConfigurationError(
            f"matmul needs 2D+ operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward_fn():
        grad = out.grad
        if a.requires_grad:
            ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
            b._accumulate(_unbroadcast(gb, b.shape))

    out = _make(data, (a, b), backward_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    data = a.data + b.data

    def backward_fn():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _make(data, (a, b), backward_fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    data = a.data * b.data

    def backward_fn():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(data, (a, b), backward_fn)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def backward_fn():
        a._accumulate(out.grad * s)

    out = _make(data, (a,), backward_fn)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward_fn():
        a._accumulate(out.grad.reshape(a.shape))

    out = _make(data, (a,), backward_fn)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn():
        a._accumulate(np.transpose(out.grad, inverse))

    out = _make(data, (a,), backward_fn)
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    data = np.asarray(a.data.sum())

    def backward_fn():
        a._accumulate(np.broadcast_to(out.grad, a.shape))

    out = _make(data, (a,), backward_fn)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries become exactly 0.

    Rows that are entirely -inf produce all-zero rows rather than NaN so
    that fully masked (padding) query positions stay inert.
    """
    with np.errstate(invalid="ignore"):
        maxes = np.max(x.data, axis=-1, keepdims=True)
        finite = np.isfinite(maxes)
        shifted = np.where(finite, x.data - np.where(finite, maxes, 0.0), -np.inf)
        exps = np.exp(shifted)
        sums = exps.sum(axis=-1, keepdims=True)
        data = np.divide(exps, sums, out=np.zeros_like(exps), where=sums > 0)

    def backward_fn():
        g = out.grad
        inner = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - inner))

    out = _make(data, (x,), backward_fn)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then scale and shift."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ConfigurationError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {h}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    data = norm * gamma.data + beta.data

    def backward_fn():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * norm).reshape(-1, h).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, h).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            # d norm: project out the mean and the component along norm
            term = gx - gx.mean(axis=-1, keepdims=True)
            term -= norm * (gx * norm).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv_std)

    out = _make(data, (x, gamma, beta), backward_fn)
    return out


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU, elementwise."""
    u = _INV_SQRT2PI_COEF * (x.data + _GELU_CUBIC * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn():
        du = _INV_SQRT2PI_COEF * (1.0 + 3.0 * _GELU_CUBIC * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x._accumulate(out.grad * local)

    out = _make(data, (x,), backward_fn)
    return out


def dropout(x: Tensor, rate: float, rng: Rng | None) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout with rate > 0 needs an Rng")
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    data = x.data * keep

    def backward_fn():
        x._accumulate(out.grad * keep)

    out = _make(data, (x,), backward_fn)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table`` by integer id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"embedding id out of range 0..{table.shape[0] - 1}: "
            f"min {ids.min()}, max {ids.max()}"
        )
    data = table.data[ids]

    def backward_fn():
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        table._accumulate(grad)

    out = _make(data, (table,), backward_fn)
    return out


def cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over positions not equal to ignore_id.

    ``logits`` has shape (positions, vocab); ``targets`` is an integer
    sequence of the same length. Ignored positions contribute nothing to the
    value or the gradient.
    """
    if logits.data.ndim != 2:
        raise ConfigurationError(f"cross_entropy needs 2D logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ConfigurationError(
            f"targets shape {targets.shape} does not match {logits.shape[0]} positions"
        )
    vocab = logits.shape[1]
    kept = targets != ignore_id
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise DataError("cross_entropy: every position is ignored")
    bad = kept & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise DataError(f"cross_entropy target out of range 0..{vocab - 1}")
    rows = logits.data[kept]
    row_targets = targets[kept]
    maxes = rows.max(axis=-1, keepdims=True)
    shifted = rows - maxes
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(n_kept), row_targets]
    data = np.asarray((log_z - picked).mean(), dtype=logits.dtype)

    def backward_fn():
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(n_kept), row_targets] -= 1.0
        grad = np.zeros_like(logits.data)
        grad[kept] = probs * (out.grad / n_kept)
        logits._accumulate(grad)

    out = _make(data, (logits,), backward_fn)
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a scalar-valued composition of the ops in this module and
    ``x`` should carry float64 data; the error is
    max over coordinates of |fd - analytic| / max(1, |analytic|).
    """
    if x.data.dtype != np.float64:
        raise ConfigurationError("finite_diff_check needs float64 input")
    probe = Tensor(x.data.copy(), requires_grad=True)
    f(probe).backward()
    analytic = probe.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = float(f(Tensor(x.data.copy())).data)
        flat[i] = original - eps
        lo = float(f(Tensor(x.data.copy())).data)
        flat[i] = original
        fd = (hi - lo) / (2.0 * eps)
        err = abs(fd - analytic[i]) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def check_finite(name: str, array: np.ndarray) -> None:
    """Raise NumericError naming ``name`` if ``array`` has NaN or inf."""
    if not np.isfinite(array).all():
        raise NumericError(f"non-finite values in {name}")
