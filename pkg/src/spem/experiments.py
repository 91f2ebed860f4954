"""Declarative experiment specs, the resumable suite runner and ablation generators."""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attention import ReweightVariant
from .backbone import AttentionConfig, NetworkConfig, build, param_count, save_checkpoint
from .data import Dataset, load_cifar, synthetic_splits
from .errors import ConfigError
from .gradcheck import SELECTORS, TOLERANCE, run_selector
from .training import EpochRecord, LossConfig, OptimizerConfig, train, write_history

log = logging.getLogger(__name__)

# paper-sized runs shrink to desk runs by changing only these knobs
SCALES = {
    "paper": dict(depth_n=18, epochs=164, train_subset=None, test_subset=None),
    "desk": dict(depth_n=2, epochs=20, train_subset=5000, test_subset=1000),
    "smoke": dict(depth_n=1, epochs=2, train_subset=200, test_subset=100),
}
DATASETS = ("cifar10", "cifar100", "synthetic")
SYNTHETIC_DEFAULT_SIZE = (1000, 200)


@dataclass
class ExperimentSpec:
    name: str
    scale: str = "desk"
    dataset: str = "cifar10"
    attention: str = "spem"
    pooling: str = "adaptive"
    reweight: str = "ours"
    se_reduction: int = 16
    eta: float = 0.1
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    dtype: str = "float32"
    seeds: List[int] = field(default_factory=lambda: [0])
    num_classes: Optional[int] = None
    # None means "take from the scale preset"
    depth_n: Optional[int] = None
    epochs: Optional[int] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None

    def resolved(self) -> "ExperimentSpec":
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}; expected one of {sorted(SCALES)}")
        updates = {k: v for k, v in SCALES[self.scale].items() if getattr(self, k) is None}
        if self.num_classes is None:
            updates["num_classes"] = 100 if self.dataset == "cifar100" else 10
        spec = dataclasses.replace(self, **updates)
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("experiment needs a name")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if not self.seeds:
            raise ConfigError(f"{self.name}: no seeds")
        self.network_config().validate()
        self.optimizer_config()
        self.loss_config()

    def network_config(self) -> NetworkConfig:
        att = AttentionConfig(kind=self.attention, reduction=self.se_reduction,
                              reweight=self.reweight, pooling=self.pooling)
        return NetworkConfig(blocks_per_stage=self.depth_n if self.depth_n is not None else 18,
                             num_classes=self.num_classes or 10, attention=att, dtype=self.dtype)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                               epochs=self.epochs if self.epochs is not None else 164,
                               batch_size=self.batch_size)

    def loss_config(self) -> LossConfig:
        return LossConfig(eta=self.eta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- spec files ---------------------------------------------------------------

_INT_KEYS = {"se_reduction", "batch_size", "num_classes", "depth_n", "epochs", "train_subset", "test_subset"}
_FLOAT_KEYS = {"eta", "lr", "momentum", "weight_decay"}
_FIELDS = {f.name for f in dataclasses.fields(ExperimentSpec)}


def _coerce(key: str, value: str):
    if key in ("seeds", "seed"):
        return [int(s) for s in value.replace(",", " ").split()]
    if key in _INT_KEYS:
        return None if value.lower() == "none" else int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def parse_spec_text(text: str) -> List[ExperimentSpec]:
    """Parse ``key = value`` lines; each ``name`` line opens a new spec.

    Keys mirror the CLI flags (``depth-n``, ``batch-size``...). Keys that
    appear before the first ``name`` are defaults for every spec.
    """
    defaults: Dict[str, object] = {}
    specs: List[Dict[str, object]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key == "seed":
            key = "seeds"
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key == "name":
            specs.append({"name": value})
            continue
        (specs[-1] if specs else defaults)[key] = _coerce(key, value)
    out = [ExperimentSpec(**{**defaults, **s}) for s in specs]
    names = [s.name for s in out]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ConfigError(f"duplicate experiment names: {sorted(dupes)}")
    return out


def format_spec(spec: ExperimentSpec) -> str:
    lines = [f"name = {spec.name}"]
    for k, v in spec.to_dict().items():
        if k == "name" or v is None:
            continue
        if k == "seeds":
            v = ",".join(str(s) for s in v)
        lines.append(f"{k.replace('_', '-')} = {v}")
    return "\n".join(lines) + "\n"


# -- data ---------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _cifar(data_dir: str, variant: str) -> Tuple[Dataset, Dataset]:
    return load_cifar(data_dir, variant)


def load_data(spec: ExperimentSpec, data_dir=None) -> Tuple[Dataset, Dataset]:
    if spec.dataset == "synthetic":
        n_train = spec.train_subset or SYNTHETIC_DEFAULT_SIZE[0]
        n_test = spec.test_subset or SYNTHETIC_DEFAULT_SIZE[1]
        return synthetic_splits(n_train, n_test, spec.num_classes or 10, seed=0)
    if data_dir is None:
        raise ConfigError(f"{spec.dataset} needs --data-dir")
    train_set, test_set = _cifar(str(data_dir), spec.dataset)
    return train_set.subset(spec.train_subset), test_set.subset(spec.test_subset)


# -- running ------------------------------------------------------------------

@dataclass
class MetricsRow:
    name: str
    seed: int
    scale: str
    params_total: int
    params_attention: int
    best_top1: float
    final_top1: float
    final_lambdas: List[float]
    wall_time: float

    COLUMNS = ("name", "seed", "scale", "params_total", "params_attention", "best_top1",
               "final_top1", "final_lambdas", "wall_time")

    def to_csv_row(self) -> List[str]:
        return [self.name, str(self.seed), self.scale, str(self.params_total), str(self.params_attention),
                repr(self.best_top1), repr(self.final_top1), ";".join(repr(v) for v in self.final_lambdas),
                repr(self.wall_time)]

    @classmethod
    def from_csv_row(cls, row: Dict[str, str]) -> "MetricsRow":
        lams = [float(v) for v in row["final_lambdas"].split(";") if v]
        return cls(row["name"], int(row["seed"]), row["scale"], int(row["params_total"]),
                   int(row["params_attention"]), float(row["best_top1"]), float(row["final_top1"]),
                   lams, float(row["wall_time"]))

    def key(self) -> Tuple[str, int]:
        return self.name, self.seed


def run_experiment(spec: ExperimentSpec, seed: int, data_dir=None,
                   checkpoint_path=None) -> Tuple[MetricsRow, List[EpochRecord]]:
    """Train one (spec, seed) pair from scratch."""
    spec = spec.resolved()
    start = time.perf_counter()
    train_set, test_set = load_data(spec, data_dir)
    net = build(spec.network_config(), seed=seed)
    counts = param_count(net)
    history = train(net, train_set, test_set, spec.optimizer_config(), spec.loss_config(), seed=seed)
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    accs = [r.test_top1 for r in history]
    row = MetricsRow(spec.name, seed, spec.scale, counts.total, counts.attention,
                     max(accs) if accs else float("nan"), accs[-1] if accs else float("nan"),
                     net.lambdas(), time.perf_counter() - start)
    return row, history


def read_metrics(path) -> List[MetricsRow]:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return []
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv_row(r) for r in csv.DictReader(fh)]


def sidecar_path(output_path) -> Path:
    return Path(output_path).with_suffix(".json")


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def run_suite(specs: Sequence[ExperimentSpec], output_path, data_dir=None,
              history_dir=None) -> List[MetricsRow]:
    """Run every (spec, seed) pair not already recorded in ``output_path``.

    Rows are appended and flushed one run at a time, so an interrupted
    suite resumes where it stopped. A JSON sidecar next to the CSV holds
    the resolved specs and per-epoch histories.
    """
    resolved = [s.resolved() for s in specs]
    names = [s.name for s in resolved]
    if len(set(names)) != len(names):
        raise ConfigError("experiment names must be unique within a suite")
    output_path = Path(output_path)
    # surface I/O problems before any training starts
    fresh = not output_path.exists() or output_path.stat().st_size == 0
    with open(output_path, "a", newline="") as fh:
        if fresh:
            csv.writer(fh, lineterminator="\n").writerow(MetricsRow.COLUMNS)
    side = sidecar_path(output_path)
    meta = json.loads(side.read_text()) if side.exists() else {"specs": {}, "histories": {}}
    for s in resolved:
        meta["specs"][s.name] = s.to_dict()
    _write_json_atomic(side, meta)

    done = {r.key(): r for r in read_metrics(output_path)}
    for spec in resolved:
        for seed in spec.seeds:
            if (spec.name, seed) in done:
                log.info("skipping completed %s seed %d", spec.name, seed)
                continue
            log.info("running %s seed %d", spec.name, seed)
            row, history = run_experiment(spec, seed, data_dir)
            with open(output_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row.to_csv_row())
                fh.flush()
                os.fsync(fh.fileno())
            meta["histories"][f"{spec.name}/{seed}"] = [dataclasses.asdict(r) for r in history]
            _write_json_atomic(side, meta)
            if history_dir is not None:
                with open(Path(history_dir) / f"{spec.name}-seed{seed}.csv", "w", newline="") as hf:
                    write_history(history, hf)
            done[row.key()] = row
    return [done[(s.name, seed)] for s in resolved for seed in s.seeds]


# -- suite generators ---------------------------------------------------------

def lambda_sweep(base: ExperimentSpec, lambdas: Iterable[float]) -> List[ExperimentSpec]:
    """One fixed-mix spec per constant, then the adaptive spec."""
    suite = []
    for lam in lambdas:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
        suite.append(dataclasses.replace(base, name=f"{base.name}-fixed{lam:g}", attention="spem",
                                         pooling=f"fixed:{lam:g}"))
    suite.append(dataclasses.replace(base, name=f"{base.name}-adaptive", attention="spem", pooling="adaptive"))
    return suite


def reweight_ablation(base: ExperimentSpec) -> List[ExperimentSpec]:
    """One spec per reweighting variant, including the default one."""
    if base.attention != "spem":
        raise ConfigError("reweight ablation needs a SPEM base spec")
    return [dataclasses.replace(base, name=f"{base.name}-rw-{v.value}", reweight=v.value)
            for v in ReweightVariant]


def effectiveness_suite(seeds: Sequence[int] = (0, 1, 2), epochs: int = 30,
                        dataset: str = "cifar10") -> List[ExperimentSpec]:
    """Desk-scale comparison: no attention, adaptive SPEM and fixed mixes 0.1/0.5/0.9."""
    base = ExperimentSpec(name="desk", scale="desk", dataset=dataset, epochs=epochs, seeds=list(seeds))
    return [dataclasses.replace(base, name="desk-baseline", attention="none")] + \
        lambda_sweep(base, [0.1, 0.5, 0.9])


def summarize_effectiveness(rows: Sequence[MetricsRow]) -> Dict[str, float]:
    by_name: Dict[str, List[float]] = {}
    for r in rows:
        by_name.setdefault(r.name, []).append(r.best_top1)
    means = {k: float(np.mean(v)) for k, v in by_name.items()}
    fixed = [v for k, v in means.items() if "-fixed" in k]
    return {
        "baseline": means["desk-baseline"],
        "adaptive": means["desk-adaptive"],
        "worst_fixed": min(fixed),
        "adaptive_vs_baseline_ok": means["desk-adaptive"] >= means["desk-baseline"] - 0.005,
        "adaptive_vs_fixed_ok": means["desk-adaptive"] >= min(fixed),
    }


def gradcheck_cmd(selector: str, seed: int = 0, trials: int = 3) -> Dict[str, float]:
    if selector not in SELECTORS:
        raise ConfigError(f"unknown gradcheck selector {selector!r}; expected one of {', '.join(SELECTORS)}")
    return run_selector(selector, seed, trials)


def gradcheck_passed(report: Dict[str, float]) -> bool:
    return all(v < TOLERANCE for v in report.values())
