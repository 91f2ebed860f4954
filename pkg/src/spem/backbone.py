"""Pre-activation bottleneck ResNet for 32x32 inputs with per-block attention.

Depth is 9n + 2 for n blocks per stage: n=9 is ResNet83, n=18 ResNet164.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .attention import ReweightVariant, SEAttention, SPEMAttention
from .autograd import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .pooling import MixCoefficient, global_avg_pool, parse_pooling

EXPANSION = 4
_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class AttentionConfig:
    kind: str = "none"  # none | se | spem
    reduction: int = 16
    reweight: str = "ours"
    pooling: str = "adaptive"
    force_identity: bool = False

    def validate(self) -> None:
        if self.kind not in ("none", "se", "spem"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.kind == "se" and self.reduction < 1:
            raise ConfigError(f"SE reduction must be >= 1, got {self.reduction}")
        if self.kind == "spem":
            ReweightVariant.parse(self.reweight)
            parse_pooling(self.pooling)


@dataclass
class NetworkConfig:
    blocks_per_stage: int = 18
    stage_widths: Tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 10
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    dtype: str = "float64"

    @property
    def depth(self) -> int:
        return 9 * self.blocks_per_stage + 2

    def validate(self) -> None:
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be positive, got {self.blocks_per_stage}")
        if len(self.stage_widths) != 3 or any(int(w) < 1 for w in self.stage_widths):
            raise ConfigError(f"need three positive stage widths, got {self.stage_widths}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        self.attention.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


def make_attention(cfg: AttentionConfig, channels: int, rng, dtype):
    if cfg.kind == "none":
        return None
    if cfg.kind == "se":
        return SEAttention(channels, cfg.reduction, rng=rng, dtype=dtype)
    return SPEMAttention(channels, ReweightVariant.parse(cfg.reweight), cfg.pooling,
                         force_identity=cfg.force_identity, dtype=dtype)


class Bottleneck(Module):
    """BN-ReLU-conv x3 (1x1, 3x3, 1x1); attention rescales the residual before the skip add."""

    def __init__(self, in_ch: int, planes: int, stride: int = 1,
                 attention: Optional[AttentionConfig] = None, rng=None, dtype=np.float64):
        out_ch = planes * EXPANSION
        self.bn1 = BatchNorm2d(in_ch, dtype)
        self.conv1 = Conv2d(in_ch, planes, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(planes, dtype)
        self.conv2 = Conv2d(planes, planes, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(planes, dtype)
        self.conv3 = Conv2d(planes, out_ch, 1, rng=rng, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)
        self.attention = make_attention(attention or AttentionConfig(), out_ch, rng, dtype)
        self.out_channels = out_ch

    def forward(self, x: Tensor) -> Tensor:
        out = ag.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(ag.relu(self.bn2(out)))
        out = self.conv3(ag.relu(self.bn3(out)))
        if self.attention is not None:
            out = self.attention(out)
        return out + skip


class PreActResNet(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        dtype = _DTYPES[config.dtype]
        rng = np.random.default_rng(seed)
        w0 = int(config.stage_widths[0])
        self.stem = Conv2d(3, w0, 3, pad=1, rng=rng, dtype=dtype)
        blocks = []
        in_ch = w0
        for stage, width in enumerate(config.stage_widths):
            for i in range(config.blocks_per_stage):
                stride = 2 if stage > 0 and i == 0 else 1
                blocks.append(Bottleneck(in_ch, int(width), stride, config.attention, rng, dtype))
                in_ch = int(width) * EXPANSION
        self.blocks = blocks
        self.bn_final = BatchNorm2d(in_ch, dtype)
        self.fc = Linear(in_ch, config.num_classes, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
            raise ShapeError(f"expected an N x 3 x 32 x 32 batch, got {x.shape}")
        out = self.stem(x)
        for block in self.blocks:
            out = block(out)
        out = ag.relu(self.bn_final(out))
        out = global_avg_pool(out).reshape(out.shape[0], out.shape[1])
        return self.fc(out)

    def attention_modules(self) -> List[Module]:
        return [b.attention for b in self.blocks if b.attention is not None]

    def mix_coefficients(self) -> List[MixCoefficient]:
        return [m for a in self.attention_modules() for m in a.mix_coefficients()]

    def lambdas(self) -> List[float]:
        """Current mixing weight of every SPEM module, in network order."""
        return [a.lambda_value() for a in self.attention_modules()
                if isinstance(a, SPEMAttention) and a.lambda_value() is not None]


def build(config: NetworkConfig, seed: int = 0) -> PreActResNet:
    return PreActResNet(config, seed)


@dataclass
class ParamCount:
    total: int
    backbone: int
    attention: int
    per_module: Dict[str, int]


def param_count(net: Module) -> ParamCount:
    """Trainable scalars, split into backbone and attention shares."""
    per_module: Dict[str, int] = {}
    backbone = attention = 0
    for name, p in net.named_parameters():
        owner = name.rsplit(".", 1)[0]
        per_module[owner] = per_module.get(owner, 0) + p.size
        if ".attention." in name:
            attention += p.size
        else:
            backbone += p.size
    return ParamCount(backbone + attention, backbone, attention, per_module)


_MAGIC = "SPEM-CHECKPOINT 1"


def save_checkpoint(net: PreActResNet, path) -> None:
    """Text manifest (name, kind, shape, offset) followed by raw little-endian float64 values."""
    lines = [_MAGIC, "config " + json.dumps(net.config.to_dict(), sort_keys=True)]
    chunks = []
    offset = 0
    entries = [(n, "param", p.data) for n, p in net.named_parameters()]
    entries += [(n, "buffer", b) for n, b in net.named_buffers()]
    for name, kind, arr in entries:
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"entry {name} {kind} {shape} {offset} {arr.size}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> Tuple[NetworkConfig, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0
    config = None
    entries = []

    def next_line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    if next_line() != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    while True:
        line = next_line()
        if line == "end":
            break
        tag, _, rest = line.partition(" ")
        if tag == "config":
            config = NetworkConfig.from_dict(json.loads(rest))
        elif tag == "entry":
            name, kind, shape, off, count = rest.split(" ")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            entries.append((name, dims, int(off), int(count)))
        else:
            raise FormatError(f"{path}: unknown header line {line!r}")
    values = np.frombuffer(raw, dtype="<f8", offset=pos)
    state = {}
    for name, dims, off, count in entries:
        if off + count > values.size:
            raise FormatError(f"{path}: entry {name} runs past end of data")
        state[name] = values[off:off + count].reshape(dims).copy()
    if config is None:
        raise FormatError(f"{path}: header has no config line")
    return config, state


def load_checkpoint(path) -> PreActResNet:
    config, state = read_checkpoint(path)
    net = build(config)
    net.load_state_dict(state)
    return net
