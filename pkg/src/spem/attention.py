"""Channel attention: the SPEM map with its reweighting variants, and an SE baseline.

Maps have shape ``(N, C, 1, 1)`` (or ``(C, 1, 1)`` for an unbatched input)
and are applied to a feature map by channel-broadcast multiplication.
"""

from __future__ import annotations

import enum
from typing import List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .nn import Module, parameter
from .pooling import (AdaptiveMix, FixedMix, MixCoefficient, PoolingStrategy, global_avg_pool,
                      global_max_pool, global_min_pool, mix_lambda, mix_pool, parse_pooling)


class ReweightVariant(enum.Enum):
    SHARED_ADD_SIGMOID = "ours"
    UNSHARED_ADD_SIGMOID = "a"
    SHARED_ADD_NO_SIGMOID = "b"
    SHARED_MUL_SIGMOID = "c"
    SIGMOID_THEN_ADD = "d"
    SIGMOID_THEN_MUL = "e"
    MAX_ONLY = "f"
    MIN_ONLY = "g"
    NO_REWEIGHT = "none"

    @classmethod
    def parse(cls, code: str) -> "ReweightVariant":
        try:
            return cls(code.strip().lower())
        except ValueError:
            codes = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown reweight variant {code!r}; expected one of {codes}") from None


class SpemParams(Module):
    """Per-channel learnables of one SPEM module.

    ``gamma_rew``/``beta_rew`` serve the max branch (or both, when shared);
    ``gamma_rew_min``/``beta_rew_min`` exist only for the unshared variant.
    The reweight pair is absent entirely when reweighting is disabled.
    """

    def __init__(self, channels: int, variant: ReweightVariant = ReweightVariant.SHARED_ADD_SIGMOID,
                 mix: Optional[MixCoefficient] = None, dtype=np.float64):
        self.channels = channels
        self.mix = mix
        self.gamma_exc = parameter(np.zeros(channels), dtype)
        self.beta_exc = parameter(np.full(channels, -1.0), dtype)
        self.gamma_rew = self.beta_rew = None
        self.gamma_rew_min = self.beta_rew_min = None
        if variant is not ReweightVariant.NO_REWEIGHT:
            self.gamma_rew = parameter(np.zeros(channels), dtype)
            self.beta_rew = parameter(np.full(channels, -1.0), dtype)
        if variant is ReweightVariant.UNSHARED_ADD_SIGMOID:
            self.gamma_rew_min = parameter(np.zeros(channels), dtype)
            self.beta_rew_min = parameter(np.full(channels, -1.0), dtype)


def _per_channel(v: Tensor, like: Tensor) -> Tensor:
    c = like.shape[-3] if like.ndim >= 3 else None
    if v.ndim != 1 or c is None or v.shape[0] != c:
        raise ShapeError(f"per-channel vector of shape {v.shape} does not match map of shape {like.shape}")
    return v.reshape(c, 1, 1)


def _affine(f: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return _per_channel(gamma, f) * f + _per_channel(beta, f)


def excitation(u: Tensor, gamma_exc: Tensor, beta_exc: Tensor) -> Tensor:
    """v_exc = sigmoid(gamma_exc * u + beta_exc), one sigmoid only."""
    return ag.sigmoid(_affine(u, gamma_exc, beta_exc))


def reweight(f_max: Tensor, f_min: Tensor, params: SpemParams, variant: ReweightVariant) -> Tensor:
    if f_max.shape != f_min.shape:
        raise ShapeError(f"f_max shape {f_max.shape} != f_min shape {f_min.shape}")
    V = ReweightVariant
    if variant is V.NO_REWEIGHT:
        return Tensor(np.ones(f_max.shape, dtype=f_max.dtype))
    g, b = params.gamma_rew, params.beta_rew
    if variant is V.SHARED_ADD_SIGMOID:
        return ag.sigmoid(_per_channel(g, f_min) * f_min + _per_channel(g, f_max) * f_max
                          + _per_channel(b, f_max))
    if variant is V.SHARED_ADD_NO_SIGMOID:
        return _per_channel(g, f_min) * f_min + _per_channel(g, f_max) * f_max + _per_channel(b, f_max)
    if variant is V.UNSHARED_ADD_SIGMOID:
        if params.gamma_rew_min is None:
            raise ConfigError("unshared reweighting needs a second (gamma, beta) pair")
        return ag.sigmoid(_affine(f_max, g, b) + _affine(f_min, params.gamma_rew_min, params.beta_rew_min))
    if variant is V.SHARED_MUL_SIGMOID:
        return ag.sigmoid(_affine(f_max, g, b) * _affine(f_min, g, b))
    if variant is V.SIGMOID_THEN_ADD:
        return ag.sigmoid(_affine(f_max, g, b)) + ag.sigmoid(_affine(f_min, g, b))
    if variant is V.SIGMOID_THEN_MUL:
        return ag.sigmoid(_affine(f_max, g, b)) * ag.sigmoid(_affine(f_min, g, b))
    if variant is V.MAX_ONLY:
        return ag.sigmoid(_affine(f_max, g, b))
    if variant is V.MIN_ONLY:
        return ag.sigmoid(_affine(f_min, g, b))
    raise ConfigError(f"unsupported variant {variant!r}")


def spem_forward(x: Tensor, params: SpemParams, variant: ReweightVariant,
                 strategy: PoolingStrategy) -> Tensor:
    """Attention map v = v_exc * v_rew for a feature map or batch."""
    f_max = global_max_pool(x)
    f_min = global_min_pool(x)
    u = mix_pool(x, strategy, f_max=f_max, f_min=f_min)
    v_exc = excitation(u, params.gamma_exc, params.beta_exc)
    v_rew = reweight(f_max, f_min, params, variant)
    return v_rew * v_exc


def recalibrate(x: Tensor, v: Tensor) -> Tensor:
    """x'[.., c, h, w] = x[.., c, h, w] * v[.., c]."""
    if x.ndim < 3 or v.ndim != x.ndim or v.shape[-3] != x.shape[-3] or v.shape[-2:] != (1, 1):
        raise ShapeError(f"attention map {v.shape} does not fit feature map {x.shape}")
    return x * v


def se_hidden(channels: int, reduction: int) -> int:
    if reduction < 1:
        raise ConfigError(f"SE reduction must be >= 1, got {reduction}")
    return max(1, channels // reduction)


def se_forward(x: Tensor, w1: Tensor, w2: Tensor, r: int = 16, b1: Optional[Tensor] = None,
               b2: Optional[Tensor] = None) -> Tensor:
    """sigmoid(W2 relu(W1 GAP(x))), weights stored as (in, out) matrices."""
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"SE expects C x H x W or N x C x H x W input, got {x.shape}")
    n, c = x.shape[:2]
    hidden = se_hidden(c, r)
    if w1.shape != (c, hidden) or w2.shape != (hidden, c):
        raise ShapeError(f"SE weights {w1.shape}, {w2.shape} do not fit {c} channels with r={r}")
    h = global_avg_pool(x).reshape(n, c) @ w1
    if b1 is not None:
        h = h + b1
    a = ag.relu(h) @ w2
    if b2 is not None:
        a = a + b2
    v = ag.sigmoid(a).reshape(n, c, 1, 1)
    return v.reshape(c, 1, 1) if unbatched else v


class SPEMAttention(Module):
    """SPEM attention applied to a block's residual branch.

    With ``force_identity`` the map is the constant ones tensor and the
    module's parameters are frozen; used to check equivalence with a
    network that has no attention at all.
    """

    def __init__(self, channels: int, variant: ReweightVariant = ReweightVariant.SHARED_ADD_SIGMOID,
                 pooling: str = "adaptive", force_identity: bool = False, dtype=np.float64):
        self.variant = variant
        self.strategy = parse_pooling(pooling, dtype)
        mix = self.strategy.mix if isinstance(self.strategy, AdaptiveMix) else None
        self.params = SpemParams(channels, variant, mix, dtype)
        self.force_identity = force_identity
        if force_identity:
            for p in self.params.parameters():
                p.requires_grad = False

    def attention_map(self, x: Tensor) -> Tensor:
        if self.force_identity:
            return Tensor(np.ones(x.shape[:-2] + (1, 1), dtype=x.dtype))
        return spem_forward(x, self.params, self.variant, self.strategy)

    def forward(self, x: Tensor) -> Tensor:
        return recalibrate(x, self.attention_map(x))

    def mix_coefficients(self) -> List[MixCoefficient]:
        if self.params.mix is None or self.force_identity:
            return []
        return [self.params.mix]

    def lambda_value(self) -> Optional[float]:
        if self.force_identity:
            return None
        if isinstance(self.strategy, AdaptiveMix):
            return float(mix_lambda(self.strategy.mix).item())
        if isinstance(self.strategy, FixedMix):
            return self.strategy.c
        return None


class SEAttention(Module):
    def __init__(self, channels: int, reduction: int = 16, rng: np.random.Generator = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        hidden = se_hidden(channels, reduction)
        self.reduction = reduction
        b1, b2 = 1.0 / np.sqrt(channels), 1.0 / np.sqrt(hidden)
        self.w1 = parameter(rng.uniform(-b1, b1, (channels, hidden)), dtype)
        self.b1 = parameter(rng.uniform(-b1, b1, hidden), dtype)
        self.w2 = parameter(rng.uniform(-b2, b2, (hidden, channels)), dtype)
        self.b2 = parameter(rng.uniform(-b2, b2, channels), dtype)

    def attention_map(self, x: Tensor) -> Tensor:
        return se_forward(x, self.w1, self.w2, self.reduction, self.b1, self.b2)

    def forward(self, x: Tensor) -> Tensor:
        return recalibrate(x, self.attention_map(x))

    def mix_coefficients(self) -> List[MixCoefficient]:
        return []
