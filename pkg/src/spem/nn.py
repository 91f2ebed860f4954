"""Parameter containers and the basic layers of the backbone."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def parameter(data, dtype=np.float64, no_decay: bool = False) -> Tensor:
    p = Tensor(np.array(data, dtype=dtype), requires_grad=True)
    p.no_decay = no_decay
    return p


class Module:
    """Walks its attributes to find parameters, buffers and child modules."""

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif getattr(value, "no_decay", None) is not None:
                yield prefix + name, value

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for k, arr in own.items():
            if arr.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        # He init over fan-out, as in the pre-activation ResNet reference code
        std = np.sqrt(2.0 / (kernel * kernel * out_ch))
        self.weight = parameter(rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)), dtype)
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float64):
        self.weight = parameter(np.ones(channels), dtype, no_decay=True)
        self.bias = parameter(np.zeros(channels), dtype, no_decay=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ag.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, (in_features, out_features)), dtype)
        self.bias = parameter(rng.uniform(-bound, bound, out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias
