"""Run configuration and the generate -> split -> train -> evaluate pipeline.

A run config is one YAML document with the sections ``seed``, ``data``,
``train`` and ``eval``. Seeds left unset are derived from the root seed
through named streams, and :meth:`RunConfig.resolved` writes them out so a
saved config reproduces the run on its own.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import MilDataset, SyntheticSpec, generate_synthetic, split_dataset
from .errors import ConfigError, SgpmilError
from .evaluation import MetricsReport, PredictionRecord, evaluate
from .seeding import stream_seed
from .trainer import TrainConfig, TrainHistory, train

SECTIONS = ("seed", "data", "train", "eval")
METRIC_KEYS = ("balanced_acc", "auc", "ace", "instance_auc", "instance_acc_best")


@dataclass
class DataConfig:
    n_bags: int = 300
    k_range: tuple[int, int] = (20, 50)
    n_features: int = 16
    n_classes: int = 2
    separation: float = 4.0
    std: float = 1.0
    positive_fraction_range: tuple[float, float] = (0.05, 0.2)
    class_means: Optional[list] = None
    split: tuple[float, float, float] = (2 / 3, 2 / 15, 1 / 5)
    seed: Optional[int] = None
    split_seed: Optional[int] = None

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_bags=self.n_bags, k_range=tuple(self.k_range), n_features=self.n_features,
            n_classes=self.n_classes, separation=self.separation, std=self.std,
            positive_fraction_range=tuple(self.positive_fraction_range), seed=self.seed,
            class_means=None if self.class_means is None else np.asarray(self.class_means, dtype=np.float64))


@dataclass
class EvalConfig:
    n_samples: int = 32
    n_bins: int = 15
    seed: Optional[int] = None
    figures: bool = True


def _section(cls, doc, name):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {name} options: {sorted(unknown)}")
    doc = dict(doc)
    for f in fields(cls):
        v = doc.get(f.name)
        # YAML reads "1e-3" (no dot) as a string
        if isinstance(v, str) and "float" in str(f.type):
            try:
                doc[f.name] = float(v)
            except ValueError:
                raise ConfigError(f"{name}.{f.name}: expected a number, got {v!r}") from None
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(seed=seed, data=_section(DataConfig, doc.get("data"), "data"),
                   train=_section(TrainConfig, doc.get("train"), "train"),
                   eval=_section(EvalConfig, doc.get("eval"), "eval"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {str(exc).splitlines()[0]}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in ("data", "train", "eval"):
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
        doc = self.to_dict()
        for item in assignments or ():
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError:
                raise ConfigError(f"override {item!r}: value is not valid YAML") from None
            if key == "seed":
                doc["seed"] = value
                continue
            section, _, name = key.partition(".")
            if section not in doc or section == "seed" or not name:
                raise ConfigError(f"override {item!r}: unknown key {key!r}")
            doc[section][name] = value
        return RunConfig.from_dict(doc)

    def resolved(self) -> "RunConfig":
        """Copy with every derived seed written out."""
        rc = RunConfig.from_dict(self.to_dict())
        if rc.data.seed is None:
            rc.data.seed = stream_seed(rc.seed, "data")
        if rc.data.split_seed is None:
            rc.data.split_seed = stream_seed(rc.seed, "split")
        if rc.eval.seed is None:
            rc.eval.seed = stream_seed(rc.seed, "eval")
        rc.train.seed = rc.seed
        try:
            rc.train.validate()
            rc.data.spec().validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SgpmilError):
                raise
            raise ConfigError(f"invalid value in config: {exc}") from None
        return rc


def make_dataset(rc: RunConfig) -> MilDataset:
    return generate_synthetic(rc.resolved().data.spec())


def make_splits(rc: RunConfig, dataset: MilDataset):
    rc = rc.resolved()
    return split_dataset(dataset, rc.data.split, seed=rc.data.split_seed)


@dataclass
class RunResult:
    config: RunConfig
    model: object
    history: TrainHistory
    report: MetricsReport
    records: list[PredictionRecord]


def run_experiment(rc: RunConfig, dataset: Optional[MilDataset] = None, log_path=None) -> RunResult:
    """Generate (unless given), split, train on train+val and evaluate on test."""
    rc = rc.resolved()
    if dataset is None:
        dataset = make_dataset(rc)
    train_set, val_set, test_set = make_splits(rc, dataset)
    model, history = train(train_set, rc.train, val_set=val_set, log_path=log_path)
    report, records = evaluate(model, test_set, n_samples=rc.eval.n_samples, seed=rc.eval.seed,
                               n_bins=rc.eval.n_bins)
    return RunResult(rc, model, history, report, records)


# -- ablation grids ----------------------------------------------------------

def parse_grid(doc) -> tuple[list[dict], Optional[int]]:
    """Cells of a grid document.

    Accepted shapes: ``{axes: {key: [values]}, n_seeds: N}``, a bare
    ``{key: [values]}`` mapping, or ``{cells: [{key: value}, ...]}``. Keys are
    training options.
    """
    if not isinstance(doc, dict) or not doc:
        raise ConfigError("grid must be a non-empty mapping")
    known = {f.name for f in fields(TrainConfig)} - {"seed"}
    n_seeds = doc.get("n_seeds")
    if n_seeds is not None and (not isinstance(n_seeds, int) or n_seeds < 1):
        raise ConfigError("n_seeds must be a positive integer")
    if "cells" in doc:
        cells = doc["cells"]
        if not isinstance(cells, list) or not cells or not all(isinstance(c, dict) for c in cells):
            raise ConfigError("grid 'cells' must be a non-empty list of mappings")
    else:
        axes = doc.get("axes", {k: v for k, v in doc.items() if k != "n_seeds"})
        if not isinstance(axes, dict) or not axes:
            raise ConfigError("grid has no axes")
        for k, v in axes.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"grid axis {k!r} must be a non-empty list")
        keys = list(axes)
        cells = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
    for cell in cells:
        bad = set(cell) - known
        if bad:
            raise ConfigError(f"grid keys are not training options: {sorted(bad)}")
    return cells, n_seeds


def cell_label(cell: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in cell.items())


def run_ablation(rc: RunConfig, cells: list[dict], n_seeds: int = 1, progress=None) -> tuple[list[dict], list[dict]]:
    """One run per cell and seed (root seed + i); returns (summary rows, per-run rows)."""
    summary, runs = [], []
    for cell in cells:
        per_seed = []
        for i in range(n_seeds):
            doc = rc.to_dict()
            doc["seed"] = rc.seed + i
            doc["train"].update(cell)
            run_rc = RunConfig.from_dict(doc)
            try:
                run_rc = run_rc.resolved()
            except ConfigError as exc:
                raise ConfigError(f"grid cell {cell_label(cell)}: {exc}") from None
            result = run_experiment(run_rc)
            row = {"cell": cell_label(cell), **cell, "seed": run_rc.seed,
                   **{k: getattr(result.report, k) for k in METRIC_KEYS}}
            runs.append(row)
            per_seed.append(row)
            if progress is not None:
                progress(row)
        agg = {"cell": cell_label(cell), **cell, "n_seeds": n_seeds}
        for k in METRIC_KEYS:
            vals = [r[k] for r in per_seed if r[k] is not None]
            agg[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            agg[f"{k}_std"] = float(np.std(vals)) if vals else None
        summary.append(agg)
    return summary, runs
