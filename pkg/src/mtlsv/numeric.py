"""Tape-based reverse-mode differentiation over numpy arrays.

Arrays are laid out as ``(..., T, D)``: the last axis holds features or
channels, the one before it holds frames. An optional leading axis carries a
mini-batch of equal-length chunks. Segment-level vectors are ``(..., D)``.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

VARIANCE_FLOOR = 1e-10


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class EmptyInputError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    """A finite-difference probe produced a non-finite value."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class Tensor:
    """A value in the computation graph.

    ``grad`` is populated by :func:`backward` for every tensor that
    requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Tensor):
    """A learnable value; its gradient accumulates across backward calls."""

    def __init__(self, value, name):
        super().__init__(np.array(value), requires_grad=True, name=name)
        self.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(root: Tensor, seed=None):
    """Propagate gradients from ``root`` to every upstream tensor.

    ``seed`` defaults to ones (so a scalar root gets d root / d root = 1).
    Intermediate gradients are cleared first; ``Param`` gradients keep
    accumulating until the caller zeroes them.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    root.grad = np.ones_like(root.data) if seed is None else np.array(seed, dtype=root.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# differentiable operations


def affine(x, w, b) -> Tensor:
    """``y[t] = x[t] @ w + b``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2:
        raise DimensionError(f"affine: weight must be a matrix, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"affine: input width {x.shape[-1]} does not match weight rows {w.shape[0]}"
        )
    if b.data.size != w.shape[1]:
        raise DimensionError(
            f"affine: bias length {b.data.size} does not match weight cols {w.shape[1]}"
        )
    bias = b.data.reshape(-1)
    out = x.data @ w.data + bias

    def _backward(g):
        _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(w, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(b.shape))

    return _result(out, (x, w, b), _backward)


def softmax(x, axis=-1) -> Tensor:
    """Normalized exponentials along ``axis`` with max subtraction.

    ``axis`` may be ``"channel"`` (last axis) or ``"time"`` (the frame axis,
    second to last) as well as an integer.
    """
    x = as_tensor(x)
    axis = _named_axis(axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), _backward)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    axis = _named_axis(axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def _backward(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), _backward)


def _named_axis(axis):
    if axis == "channel":
        return -1
    if axis == "time":
        return -2
    return axis


def splice(x, offsets: Sequence[int]) -> Tensor:
    """Concatenate frames ``t + o`` for each offset, clamping at the edges."""
    x = as_tensor(x)
    offsets = list(offsets)
    if not offsets:
        raise ValueError("splice: offsets must be nonempty")
    if x.data.ndim < 2:
        raise DimensionError(f"splice: expected a frame sequence, got shape {x.shape}")
    n_frames = x.shape[-2]
    if n_frames == 0:
        raise EmptyInputError("splice: input has no frames")
    if offsets == [0]:
        return x
    t = np.arange(n_frames)
    index = np.clip(t[:, None] + np.asarray(offsets)[None, :], 0, n_frames - 1)
    # (..., T, K, D) -> (..., T, K*D)
    gathered = np.take(x.data, index, axis=-2)
    out = gathered.reshape(*x.shape[:-2], n_frames, len(offsets) * x.shape[-1])

    def _backward(g):
        if not x.requires_grad:
            return
        g = g.reshape(*x.shape[:-2], n_frames, len(offsets), x.shape[-1])
        gx = np.zeros_like(x.data)
        gx_by_time = np.moveaxis(gx, -2, 0)
        for k in range(len(offsets)):
            np.add.at(gx_by_time, index[:, k], np.moveaxis(g[..., k, :], -2, 0))
        _accumulate(x, gx)

    return _result(out, (x,), _backward)


def stats_pool(x) -> Tensor:
    """Per-channel mean and standard deviation over frames.

    Population variance (divisor T). Variances at or below
    ``VARIANCE_FLOOR`` yield a standard deviation of exactly zero with zero
    gradient, so constant inputs stay finite.
    """
    x = as_tensor(x)
    n_frames = x.shape[-2]
    mean = x.data.sum(axis=-2) / n_frames
    centered = x.data - mean[..., None, :]
    var = (centered * centered).sum(axis=-2) / n_frames
    live = var > VARIANCE_FLOOR
    std = np.where(live, np.sqrt(np.where(live, var, 1.0)), 0.0).astype(x.data.dtype)
    out = np.concatenate([mean, std], axis=-1)

    def _backward(g):
        d = mean.shape[-1]
        g_mean, g_std = g[..., :d], g[..., d:]
        g_var = np.where(live, g_std / (2.0 * np.where(live, std, 1.0)), 0.0)
        gx = g_mean[..., None, :] / n_frames + 2.0 * centered * g_var[..., None, :] / n_frames
        _accumulate(x, gx)

    return _result(out, (x,), _backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def _backward(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), _backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    pos = x.data >= 0
    z = np.exp(-np.abs(x.data))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def _backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), _backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; gradients are summed back."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), _backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * factor

    def _backward(g):
        _accumulate(x, g * factor)

    return _result(out, (x,), _backward)


def grl(x, coef: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-coef * g`` backward."""
    x = as_tensor(x)

    def _backward(g):
        _accumulate(x, -coef * g)

    return _result(x.data, (x,), _backward)


def mvn(x, running=None, train=True, momentum=0.1, eps=1e-5) -> Tensor:
    """Mean-variance normalization per channel over every frame in the batch.

    ``running`` is a ``(mean, var)`` pair of arrays updated in place when
    training and used instead of batch statistics otherwise.
    """
    x = as_tensor(x)
    axes = tuple(range(x.data.ndim - 1))
    if train:
        count = x.data.size // x.shape[-1]
        mean = x.data.sum(axis=axes) / count
        centered = x.data - mean
        var = (centered * centered).sum(axis=axes) / count
        if running is not None:
            running[0][...] = (1 - momentum) * running[0] + momentum * mean
            running[1][...] = (1 - momentum) * running[1] + momentum * var
    else:
        if running is None:
            return x
        mean, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean) * inv).astype(x.data.dtype)

    def _backward(g):
        if not train:
            _accumulate(x, g * inv)
            return
        n = x.data.size // x.shape[-1]
        gsum = g.sum(axis=axes)
        gxhat = (g * xhat).sum(axis=axes)
        _accumulate(x, inv / n * (n * g - gsum - xhat * gxhat))

    return _result(xhat, (x,), _backward)


def concat(parts: Sequence, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, gp)

    return _result(out, parts, _backward)


def total(x) -> Tensor:
    x = as_tensor(x)

    def _backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), _backward)


def add(*terms) -> Tensor:
    terms = [as_tensor(t) for t in terms]
    out = sum(t.data for t in terms)

    def _backward(g):
        for t in terms:
            _accumulate(t, _unbroadcast(g, t.shape))

    return _result(out, terms, _backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    logp = log_softmax(logits).data
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = max(labels.size, 1)
    out = np.asarray(-picked.sum() / count)

    def _backward(g):
        onehot = np.zeros_like(logp)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        _accumulate(logits, g * (np.exp(logp) - onehot) / count)

    return _result(out, (logits,), _backward)


def kl_divergence(target, logits) -> Tensor:
    """Mean over rows of KL(target || softmax(logits)), with 0 log 0 = 0."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=logits.data.dtype)
    if target.shape != logits.shape:
        raise DimensionError(
            f"kl_divergence: target shape {target.shape} does not match logits {logits.shape}"
        )
    logq = log_softmax(logits).data
    pos = target > 0
    logt = np.log(np.where(pos, target, 1.0))
    count = max(target.size // target.shape[-1], 1)
    out = np.asarray((np.where(pos, target * (logt - logq), 0.0)).sum() / count)

    def _backward(g):
        # d/dz of -sum t log q = q * sum(t) - t
        tsum = target.sum(axis=-1, keepdims=True)
        _accumulate(logits, g * (np.exp(logq) * tsum - target) / count)

    return _result(out, (logits,), _backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# initialization and gradient checking


def name_seed(seed: int, name: str) -> np.random.Generator:
    """A generator keyed on (seed, name): toggling one parameter group never
    perturbs the initial values of another."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def glorot_uniform(rows, cols, rng, dtype=np.float64):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
    reference: Callable[..., Tensor] | None = None,
) -> float:
    """Largest relative discrepancy between analytic and central-difference
    gradients of ``sum(R * op(*inputs))`` for a fixed random ``R``.

    The relative error at a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. Runs in float64.
    Finite differences are taken of ``reference`` when given; ops whose
    backward deliberately departs from their forward (gradient reversal)
    are checked against the function whose true gradient they realize.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside the supported range")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [Param(a, name=f"input{i}") for i, a in enumerate(arrays)]
    out = op(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    backward(out, seed=weights)

    target = reference or op
    fixed = [Tensor(a) for a in arrays]

    def probe(i, flat_index, delta):
        moved = arrays[i].copy()
        moved.reshape(-1)[flat_index] += delta
        trial = list(fixed)
        trial[i] = Tensor(moved)
        value = float((weights * target(*trial).data).sum())
        if not np.isfinite(value):
            raise GradCheckError(
                f"non-finite output probing input {i} at coordinate {flat_index}", (i, flat_index)
            )
        return value

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad.reshape(-1)
        for j in range(arrays[i].size):
            numeric = (probe(i, j, epsilon) - probe(i, j, -epsilon)) / (2 * epsilon)
            err = abs(analytic[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
