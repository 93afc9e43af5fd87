"""TDNN, squeeze-and-excitation, gradient reversal and phoneme-aware pooling."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numeric as nm
from .numeric import DimensionError, Tensor


class PoolingMode(str, enum.Enum):
    STATS = "stats"
    PHONE_ATT_LITERAL = "phone_att_literal"
    PHONE_ATT_WEIGHTED = "phone_att_weighted"

    @property
    def phoneme_aware(self) -> bool:
        return self is not PoolingMode.STATS

    @classmethod
    def parse(cls, value) -> "PoolingMode":
        if isinstance(value, cls):
            return value
        aliases = {"literal": cls.PHONE_ATT_LITERAL, "weighted": cls.PHONE_ATT_WEIGHTED}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class TdnnLayerSpec:
    offsets: tuple
    in_dim: int
    out_dim: int
    use_se: bool = False
    activation: str = "relu"
    normalize: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"TDNN dims must be positive, got {self.in_dim}x{self.out_dim}")
        if not self.offsets:
            raise ValueError("TDNN offsets must be nonempty")
        if list(self.offsets) != sorted(self.offsets):
            raise ValueError(f"TDNN offsets must be sorted, got {self.offsets}")

    @property
    def spliced_dim(self) -> int:
        return self.in_dim * len(self.offsets)


@dataclass(frozen=True)
class SeBlockSpec:
    channels: int
    reduction_ratio: int = 4

    @property
    def bottleneck(self) -> int:
        return max(1, self.channels // self.reduction_ratio)


_ACTIVATIONS = {
    "relu": nm.relu,
    "identity": lambda x: x,
    "sigmoid": nm.sigmoid,
}


def tdnn_forward(x, spec: TdnnLayerSpec, params: Mapping[str, Tensor], running=None, train=True) -> Tensor:
    """Splice, affine, activation, then optional normalization and SE gating.

    ``params`` holds ``W`` (spliced_dim x out_dim) and ``b``; with
    ``use_se`` it also holds ``se.W1``, ``se.b1``, ``se.W2``, ``se.b2``.
    """
    x = nm.as_tensor(x)
    if x.shape[-1] != spec.in_dim:
        raise DimensionError(f"tdnn: input width {x.shape[-1]} but layer expects {spec.in_dim}")
    h = nm.splice(x, spec.offsets)
    h = nm.affine(h, params["W"], params["b"])
    h = _ACTIVATIONS[spec.activation](h)
    if spec.normalize:
        h = nm.mvn(h, running=running, train=train)
    if spec.use_se:
        h = se_forward(h, SeBlockSpec(spec.out_dim), _subset(params, "se."))
    return h


def se_forward(o, spec: SeBlockSpec, params: Mapping[str, Tensor]) -> Tensor:
    """Recalibrate channels of ``o`` by gates computed from its pooled stats."""
    o = nm.as_tensor(o)
    if o.shape[-1] != spec.channels:
        raise DimensionError(f"se: input has {o.shape[-1]} channels, block expects {spec.channels}")
    s = nm.stats_pool(o)
    z = nm.relu(nm.affine(s, params["W1"], params["b1"]))
    gates = nm.sigmoid(nm.affine(z, params["W2"], params["b2"]))
    # (..., C) -> (..., 1, C) to broadcast over frames
    gates = _expand_time(gates)
    return nm.mul(o, gates)


def _expand_time(t: Tensor) -> Tensor:
    shape = t.shape

    def _backward(g):
        nm._accumulate(t, g.reshape(shape))

    return nm._result(t.data[..., None, :], (t,), _backward)


def grl(x, coef: float = 1.0) -> Tensor:
    return nm.grl(x, coef)


def phoneme_attentive_pool(p, h5, mode=PoolingMode.PHONE_ATT_WEIGHTED, scale=1.5, check_simplex=True) -> Tensor:
    """Pool the fifth-layer output using per-frame phoneme posteriors.

    Attention is ``scale * softmax_over_time(p * h5)`` computed per channel.
    The literal mode returns the mean and standard deviation of the
    attention map; the weighted mode returns the attention-weighted mean and
    standard deviation of ``h5`` (weights renormalized to sum to one).
    """
    p, h5 = nm.as_tensor(p), nm.as_tensor(h5)
    mode = PoolingMode.parse(mode)
    if p.shape != h5.shape:
        raise DimensionError(f"pooling: posterior shape {p.shape} differs from features {h5.shape}")
    if scale <= 0:
        raise ValueError(f"pooling scale must be positive, got {scale}")
    if check_simplex:
        sums = p.data.sum(axis=-1)
        if np.any(p.data < -1e-6) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("pooling: posterior rows must lie on the probability simplex")
    if mode is PoolingMode.STATS:
        return nm.stats_pool(h5)

    weights = nm.scale(nm.softmax(nm.mul(p, h5), axis="time"), scale)
    if mode is PoolingMode.PHONE_ATT_LITERAL:
        return nm.stats_pool(weights)
    return weighted_stats(weights, h5)


def weighted_stats(w, x) -> Tensor:
    """Per-channel weighted mean and std of ``x`` over frames.

    Weights are renormalized per channel. The standard deviation uses the
    same floor as :func:`numeric.stats_pool`.
    """
    w, x = nm.as_tensor(w), nm.as_tensor(x)
    wsum = w.data.sum(axis=-2, keepdims=True)
    wn = w.data / wsum
    mean = (wn * x.data).sum(axis=-2)
    centered = x.data - mean[..., None, :]
    var = (wn * centered**2).sum(axis=-2)
    live = var > nm.VARIANCE_FLOOR
    std = np.where(live, np.sqrt(np.where(live, var, 1.0)), 0.0).astype(x.data.dtype)
    out = np.concatenate([mean, std], axis=-1)

    def _backward(g):
        d = mean.shape[-1]
        g_mean = g[..., :d][..., None, :]
        g_var = np.where(live, g[..., d:] / (2.0 * np.where(live, std, 1.0)), 0.0)[..., None, :]
        # var = sum wn (x - mean)^2; d var / d mean = 0 because weights sum to 1
        g_wn = g_mean * x.data + g_var * centered**2
        g_x = g_mean * wn + g_var * 2.0 * wn * centered
        # wn = w / sum(w)
        g_w = (g_wn - (g_wn * wn).sum(axis=-2, keepdims=True)) / wsum
        nm._accumulate(w, g_w)
        nm._accumulate(x, g_x)

    return nm._result(out, (w, x), _backward)


def _subset(params: Mapping[str, Tensor], prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def init_tdnn(spec: TdnnLayerSpec, prefix: str, seed: int, dtype=np.float64) -> dict:
    """Fresh parameters for one TDNN layer, keyed ``<prefix>.W`` and so on."""
    out = {}
    out.update(init_affine(f"{prefix}", spec.spliced_dim, spec.out_dim, seed, dtype))
    if spec.use_se:
        se = SeBlockSpec(spec.out_dim)
        out.update(init_affine(f"{prefix}.se", 2 * se.channels, se.bottleneck, seed, dtype, suffix="1"))
        out.update(init_affine(f"{prefix}.se", se.bottleneck, se.channels, seed, dtype, suffix="2"))
    return out


def init_affine(prefix: str, rows: int, cols: int, seed: int, dtype=np.float64, suffix: str = "") -> dict:
    w_name, b_name = f"{prefix}.W{suffix}", f"{prefix}.b{suffix}"
    w = nm.glorot_uniform(rows, cols, nm.name_seed(seed, w_name), dtype)
    return {w_name: nm.Param(w, w_name), b_name: nm.Param(np.zeros((1, cols), dtype=dtype), b_name)}
