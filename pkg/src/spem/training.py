"""SGD training with the mixing-coefficient penalty."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, cross_entropy, no_grad
from .data import AugmentConfig, Dataset, Normalization, augment_batch
from .errors import ConfigError, StateError
from .pooling import MixCoefficient

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 164
    # (epoch, multiplier of the base lr) pairs; None means x0.1 at 50% and x0.01 at 75%
    lr_schedule: Optional[List[Tuple[int, float]]] = None
    batch_size: int = 128

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def schedule(self) -> List[Tuple[int, float]]:
        if self.lr_schedule is not None:
            return sorted((int(e), float(m)) for e, m in self.lr_schedule)
        return [(self.epochs // 2, 0.1), ((3 * self.epochs) // 4, 0.01)]

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for start, m in self.schedule():
            if epoch >= start:
                mult = m
        return self.lr * mult


@dataclass
class LossConfig:
    eta: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"penalty coefficient must be >= 0, got {self.eta}")


def total_loss(logits: Tensor, labels, mix_coeffs: Sequence[MixCoefficient], cfg: LossConfig) -> Tensor:
    """Mean cross-entropy plus eta * sum of p0^2 + p1^2 over every mix coefficient."""
    loss = cross_entropy(logits, labels)
    if cfg.eta and mix_coeffs:
        penalty = mix_coeffs[0].penalty()
        for m in mix_coeffs[1:]:
            penalty = penalty + m.penalty()
        loss = loss + penalty * cfg.eta
    return loss


def sgd_step(params: Sequence[Tensor], state: Dict[int, np.ndarray], cfg: OptimizerConfig,
             lr: Optional[float] = None) -> None:
    """v <- momentum * v + (grad + wd * param); param <- param - lr * v.

    Parameters flagged ``no_decay`` (BN affine, mix coefficients) skip weight decay.
    """
    lr = cfg.lr if lr is None else lr
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or tuple(p.shape)} has no gradient")
    for p in params:
        d = p.grad
        if cfg.weight_decay and not getattr(p, "no_decay", False):
            d = d + cfg.weight_decay * p.data
        v = state.get(id(p))
        v = d.copy() if v is None else cfg.momentum * v + d
        state[id(p)] = v
        p.data -= lr * v


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_top1: float
    lambdas: List[float] = field(default_factory=list)


def history_csv(history: Sequence[EpochRecord]) -> str:
    """epoch, train_loss, test_top1, then one lambda column per SPEM module."""
    buf = io.StringIO()
    write_history(history, buf)
    return buf.getvalue()


def write_history(history: Sequence[EpochRecord], fh) -> None:
    width = max((len(r.lambdas) for r in history), default=0)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "test_top1"] + [f"lambda_{i}" for i in range(width)])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.test_top1)] + [repr(v) for v in r.lambdas])


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax resolves ties to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model, dataset: Dataset, norm: Optional[Normalization] = None, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode; inputs are normalized only."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    norm = norm or dataset.normalization()
    model.eval()
    correct = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = norm.apply(dataset.images[start:start + batch_size], model.dtype)
            logits = model(Tensor(x)).data
            correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start:start + batch_size]))
    return correct / len(dataset)


def train(model, train_set: Dataset, test_set: Optional[Dataset], opt_cfg: OptimizerConfig,
          loss_cfg: LossConfig, seed: int = 0, augment_cfg: Optional[AugmentConfig] = None,
          norm: Optional[Normalization] = None, augment: bool = True,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> List[EpochRecord]:
    """Run ``opt_cfg.epochs`` epochs of SGD; deterministic for a fixed seed."""
    classes = model.config.num_classes
    if train_set.num_classes != classes or (test_set is not None and test_set.num_classes != classes):
        raise ConfigError(f"dataset classes do not match the model's {classes} outputs")
    augment_cfg = augment_cfg or AugmentConfig()
    norm = norm or train_set.normalization()
    params = model.trainable_parameters()
    state: Dict[int, np.ndarray] = {}
    history: List[EpochRecord] = []
    n = len(train_set)
    for epoch in range(opt_cfg.epochs):
        model.train()
        lr = opt_cfg.lr_at(epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, opt_cfg.batch_size):
            idx = order[start:start + opt_cfg.batch_size]
            if augment:
                x = augment_batch(train_set.images, idx, augment_cfg, norm, seed, epoch, model.dtype)
            else:
                x = norm.apply(train_set.images[idx], model.dtype)
            loss = total_loss(model(Tensor(x)), train_set.labels[idx], model.mix_coefficients(), loss_cfg)
            model.zero_grad()
            loss.backward()
            sgd_step(params, state, opt_cfg, lr)
            loss_sum += loss.item() * len(idx)
        acc = evaluate(model, test_set, norm) if test_set is not None and len(test_set) else float("nan")
        rec = EpochRecord(epoch + 1, loss_sum / n, acc, model.lambdas())
        log.info("epoch %d loss %.4f top1 %.4f", rec.epoch, rec.train_loss, rec.test_top1)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history
