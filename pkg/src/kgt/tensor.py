"""Reverse-mode autodiff over numpy arrays with an explicit tape.

Ops record themselves on the innermost active :class:`Tape`; ``Tape.backward``
replays the records once, in reverse execution order (execution order is a
topological order, so each node's output gradient is complete before its
backward runs). Tensors store float32 by default; gradient checking runs the
same code in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A numpy array plus an accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops for one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into every reachable tensor's ``grad``."""
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._records):
            if out.grad is None:
                continue  # not on any path to the loss
            backward(out.grad)


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
    if _TAPES and out.requires_grad:
        _TAPES[-1]._records.append((out, backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along the axes numpy broadcast it over."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _record(out, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _record(out, backward)


def gather_rows(a: Tensor, indexes: np.ndarray) -> Tensor:
    """Fancy-index the first axis; gradients scatter-add back (repeats sum)."""
    idx = np.asarray(indexes, dtype=np.int64)
    out = Tensor(a.data[idx], requires_grad=a.requires_grad)

    def backward(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _record(out, backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[..., start:stop], requires_grad=a.requires_grad)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accumulate(a, ga)

    return _record(out, backward)


def where(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean condition."""
    cond = np.asarray(condition, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data), requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        _accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _record(out, backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype), requires_grad=a.requires_grad)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _record(out, backward)


_GELU_COEFF = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_COEFF * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + th), requires_grad=a.requires_grad)

    def backward(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_COEFF * (1.0 + 3 * 0.044715 * x * x)
        _accumulate(a, g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _record(out, backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = Tensor(
        xhat * gain.data + bias.data,
        requires_grad=a.requires_grad or gain.requires_grad or bias.requires_grad,
    )

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat)
        _accumulate(bias, g.sum(axis=reduce_axes) if reduce_axes else g)
        gx = g * gain.data
        mean_gx = gx.mean(axis=-1, keepdims=True)
        mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv_std * (gx - mean_gx - xhat * mean_gx_xhat))

    return _record(out, backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * keep, requires_grad=a.requires_grad)

    def backward(g):
        _accumulate(a, g * keep)

    return _record(out, backward)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where mask is True.

    Masked positions come out exactly zero; each row must keep at least one
    unmasked position.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax row with every position masked")
    x = np.where(m, a.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, requires_grad=a.requires_grad)

    def backward(g):
        # p is zero at masked slots, so the usual softmax backward stays exact
        _accumulate(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _record(out, backward)


def softmax(a: Tensor) -> Tensor:
    return masked_softmax(a, np.ones(a.data.shape[-1], dtype=bool))


def smoothed_labels(targets: np.ndarray, classes: int, alpha: float) -> np.ndarray:
    """Mix one-hot targets with the uniform distribution: (1-a)*onehot + a/K."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {alpha}")
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise ValueError("target id out of range")
    y = np.full((idx.size, classes), alpha / classes, dtype=np.float64)
    y[np.arange(idx.size), idx] += 1.0 - alpha
    return y


def cross_entropy(logits: Tensor, targets: np.ndarray, alpha: float = 0.0) -> Tensor:
    """Per-row cross entropy against label-smoothed targets.

    ``logits`` is [P, C]; returns a [P] tensor of losses. With alpha 0 the
    smoothed target is exactly one-hot, so the loss and gradient are bitwise
    identical to hard cross entropy.
    """
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects [P, C] logits, got shape {z.shape}")
    y = smoothed_labels(targets, z.shape[1], alpha).astype(z.dtype)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -(y * logp).sum(axis=-1)
    if not np.isfinite(loss).all():
        raise FloatingPointError("non-finite cross-entropy loss")
    out = Tensor(loss, requires_grad=logits.requires_grad)

    def backward(g):
        p = np.exp(logp)
        _accumulate(logits, (p - y) * g[:, None])

    return _record(out, backward)


def answer_masked_cross_entropy(logits: Tensor, answer_sets: Sequence[np.ndarray]) -> Tensor:
    """Per-query loss that scores each answer only against non-answers.

    For query row s and answer set A, each answer a contributes
    ``-log(exp(s_a) / (exp(s_a) + sum over e outside A of exp(s_e)))`` and the
    row's loss is the mean over A. Logits of the other answers do not enter
    answer a's term at all.
    """
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"answer_masked_cross_entropy expects [Q, V] logits, got {z.shape}")
    n_classes = z.shape[1]
    sets = []
    for i, answers in enumerate(answer_sets):
        a = np.asarray(answers, dtype=np.int64).reshape(-1)
        if a.size == 0:
            raise ValueError(f"query {i} has an empty answer set")
        if a.size != np.unique(a).size:
            raise ValueError(f"query {i} has duplicate answers")
        if a.min() < 0 or a.max() >= n_classes:
            raise ValueError(f"query {i} has an answer id out of range")
        sets.append(a)
    if len(sets) != z.shape[0]:
        raise ValueError("one answer set per logit row required")

    losses = np.zeros(z.shape[0], dtype=z.dtype)
    denoms = []
    for i, answers in enumerate(sets):
        row = z[i]
        neg_mask = np.ones(n_classes, dtype=bool)
        neg_mask[answers] = False
        negs = row[neg_mask]
        if negs.size:
            nmax = negs.max()
            lse_neg = nmax + np.log(np.exp(negs - nmax).sum())
        else:
            lse_neg = -np.inf
        denom = np.logaddexp(row[answers], lse_neg)
        losses[i] = (denom - row[answers]).mean()
        denoms.append((neg_mask, denom))
    if not np.isfinite(losses).all():
        raise FloatingPointError("non-finite fine-tune loss")
    out = Tensor(losses, requires_grad=logits.requires_grad)

    def backward(g):
        gz = np.zeros_like(z)
        for i, answers in enumerate(sets):
            neg_mask, denom = denoms[i]
            k = answers.size
            # [A, V] responsibilities under each answer's restricted softmax
            p = np.exp(z[i][None, :] - denom[:, None])
            p[:, ~neg_mask] = 0.0
            gz[i] += p.sum(axis=0) * (g[i] / k)
            p_self = np.exp(z[i][answers] - denom)
            gz[i, answers] += (p_self - 1.0) * (g[i] / k)
        _accumulate(logits, gz)

    return _record(out, backward)
