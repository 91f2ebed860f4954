"""Global spatial pooling and the self-adaptive max/min mix.

All operators reduce the last two axes, so they accept a single ``C x H x W``
feature map or an ``N x C x H x W`` batch and return ``(..., C, 1, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .autograd import GlobalExtremePool, Tensor
from .errors import ConfigError, DegenerateCoefficientError
from .nn import Module, parameter


def _check_plane(x: Tensor) -> None:
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ValueError(f"global pooling needs a non-empty spatial plane, got shape {x.shape}")


def global_max_pool(x: Tensor) -> Tensor:
    _check_plane(x)
    return GlobalExtremePool.apply(x, mode="max")


def global_min_pool(x: Tensor) -> Tensor:
    _check_plane(x)
    return GlobalExtremePool.apply(x, mode="min")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_plane(x)
    return x.mean(axis=(-2, -1), keepdims=True)


class MixCoefficient(Module):
    """Trainable pair (p0, p1); lambda is always derived, never stored."""

    def __init__(self, p0: float = 0.5, p1: float = 0.5, dtype=np.float64):
        # excluded from generic weight decay: the loss penalizes them directly
        self.p0 = parameter(p0, dtype, no_decay=True)
        self.p1 = parameter(p1, dtype, no_decay=True)

    def penalty(self) -> Tensor:
        return self.p0 * self.p0 + self.p1 * self.p1

    def value(self) -> float:
        return float(mix_lambda(self).item())


def mix_weights(m: MixCoefficient) -> Tuple[Tensor, Tensor]:
    """(lambda, 1 - lambda) as p0^2 and p1^2 over their common sum."""
    sq0 = m.p0 * m.p0
    sq1 = m.p1 * m.p1
    denom = sq0 + sq1
    if not np.all(denom.data > 0):
        raise DegenerateCoefficientError("p0 = p1 = 0 leaves the mixing weight undefined")
    return sq0 / denom, sq1 / denom


def mix_lambda(m: MixCoefficient) -> Tensor:
    return mix_weights(m)[0]


@dataclass(frozen=True)
class GAP:
    def describe(self) -> str:
        return "gap"


@dataclass(frozen=True)
class FixedMix:
    c: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ConfigError(f"fixed mix constant {self.c} outside [0, 1]")

    def describe(self) -> str:
        return f"fixed:{self.c:g}"


@dataclass
class AdaptiveMix:
    mix: MixCoefficient = field(default_factory=MixCoefficient)

    def describe(self) -> str:
        return "adaptive"


PoolingStrategy = Union[GAP, FixedMix, AdaptiveMix]


def parse_pooling(text: str, dtype=np.float64) -> PoolingStrategy:
    """Build a strategy from ``gap``, ``fixed:<c>`` or ``adaptive``.

    Adaptive strategies get a fresh coefficient pair each call.
    """
    text = text.strip().lower()
    if text == "gap":
        return GAP()
    if text == "adaptive":
        return AdaptiveMix(MixCoefficient(dtype=dtype))
    if text.startswith("fixed:"):
        try:
            c = float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed mix constant in {text!r}") from None
        return FixedMix(c)
    raise ConfigError(f"unknown pooling strategy {text!r}")


def mix_pool(x: Tensor, strategy: PoolingStrategy, f_max: Optional[Tensor] = None,
             f_min: Optional[Tensor] = None) -> Tensor:
    """u = lambda * f_max + (1 - lambda) * f_min, or GAP.

    Precomputed extremal pools may be passed in so callers can share them.
    """
    if isinstance(strategy, GAP):
        return global_avg_pool(x)
    if f_max is None:
        f_max = global_max_pool(x)
    if f_min is None:
        f_min = global_min_pool(x)
    if isinstance(strategy, FixedMix):
        return f_max * strategy.c + f_min * (1.0 - strategy.c)
    if isinstance(strategy, AdaptiveMix):
        lam, comp = mix_weights(strategy.mix)
        return f_max * lam + f_min * comp
    raise ConfigError(f"unsupported pooling strategy {strategy!r}")
