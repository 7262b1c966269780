"""Synthetic MIL bags with known instance labels, persistence and splits.

Binary dataset layout (all integers little-endian)::

    b"SGPMILDS"  u32 version  u32 n  <n bytes of JSON header>
    repeated per bag:
        u32 n  <n bytes of JSON bag metadata>
        K*D float64 features (row-major)
        K int64 instance labels        (only when has_instance_labels)

The header carries ``n_features``, ``n_classes``, ``n_bags`` and
``class_counts``. A ``.jsonl`` path selects the text variant: a header object
on the first line, then one object per bag.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError, InvalidArgumentError, StratificationError

MAGIC = b"SGPMILDS"
FORMAT_VERSION = 1


def bag_label_from_instances(instance_labels) -> int:
    """Bag label implied by instance labels: 0 if all negative, else the largest class present."""
    labels = np.asarray(instance_labels)
    return int(labels.max()) if labels.size and labels.max() > 0 else 0


@dataclass
class InstanceBag:
    id: str
    features: np.ndarray
    bag_label: int
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidArgumentError(f"bag {self.id!r}: features must be a non-empty (K, D) matrix")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgumentError(f"bag {self.id!r}: features must be finite")
        self.bag_label = int(self.bag_label)
        if self.instance_labels is not None:
            self.instance_labels = np.ascontiguousarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (self.n_instances,):
                raise InvalidArgumentError(f"bag {self.id!r}: need one instance label per instance")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def satisfies_mil_assumption(self) -> bool:
        if self.instance_labels is None:
            return True
        return bag_label_from_instances(self.instance_labels) == self.bag_label


@dataclass
class MilDataset:
    bags: list[InstanceBag]
    n_features: int
    n_classes: int

    def __post_init__(self):
        for bag in self.bags:
            if bag.n_features != self.n_features:
                raise InvalidArgumentError(
                    f"bag {bag.id!r} has {bag.n_features} features, dataset expects {self.n_features}")
            if not 0 <= bag.bag_label < self.n_classes:
                raise InvalidArgumentError(f"bag {bag.id!r} label {bag.bag_label} out of range")

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[InstanceBag]:
        return iter(self.bags)

    def __getitem__(self, i) -> InstanceBag:
        return self.bags[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.bag_label for b in self.bags], dtype=np.int64)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist() if self.bags \
            else [0] * self.n_classes

    @property
    def has_instance_labels(self) -> bool:
        return bool(self.bags) and all(b.instance_labels is not None for b in self.bags)

    def subset(self, indices: Sequence[int]) -> "MilDataset":
        return MilDataset([self.bags[i] for i in indices], self.n_features, self.n_classes)


@dataclass
class SyntheticSpec:
    """Gaussian instance clusters; cluster 0 is background, cluster c marks class c.

    When ``class_means`` is omitted, cluster 0 sits at the origin and cluster
    ``c`` at ``separation`` along axis ``c - 1``.
    """

    n_bags: int = 100
    k_range: tuple[int, int] = (20, 50)
    n_features: int = 16
    n_classes: int = 2
    separation: float = 4.0
    std: float = 1.0
    positive_fraction_range: tuple[float, float] = (0.05, 0.2)
    seed: int = 0
    class_means: Optional[np.ndarray] = field(default=None, repr=False)

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        means = np.zeros((self.n_classes, self.n_features))
        for c in range(1, self.n_classes):
            means[c, c - 1] = self.separation
        return means

    def validate(self) -> None:
        if self.n_bags < 0:
            raise InvalidArgumentError("n_bags must be non-negative")
        kmin, kmax = self.k_range
        if not 1 <= kmin <= kmax:
            raise InvalidArgumentError(f"invalid k_range {self.k_range}")
        if self.n_classes < 2 or self.n_features < 1:
            raise InvalidArgumentError("need n_classes >= 2 and n_features >= 1")
        if self.class_means is None and self.n_classes - 1 > self.n_features:
            raise InvalidArgumentError("default cluster means need n_classes - 1 <= n_features")
        means = self.means()
        if means.shape != (self.n_classes, self.n_features):
            raise InvalidArgumentError(f"class_means must have shape {(self.n_classes, self.n_features)}")
        for i in range(self.n_classes):
            for j in range(i):
                if np.array_equal(means[i], means[j]):
                    raise InvalidArgumentError(f"cluster means {j} and {i} coincide")
        if not self.std > 0:
            raise InvalidArgumentError("std must be positive")
        lo, hi = self.positive_fraction_range
        if not 0 < lo <= hi <= 1:
            raise InvalidArgumentError(f"positive_fraction_range {self.positive_fraction_range} not within (0, 1]")


def generate_synthetic(spec: SyntheticSpec) -> MilDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = spec.means()
    kmin, kmax = spec.k_range
    lo, hi = spec.positive_fraction_range
    labels = rng.permutation(np.arange(spec.n_bags) % spec.n_classes)
    bags = []
    for i, label in enumerate(labels):
        k = int(rng.integers(kmin, kmax + 1))
        inst = np.zeros(k, dtype=np.int64)
        if label > 0:
            frac = hi if lo == hi else rng.uniform(lo, hi)
            n_pos = int(np.clip(round(frac * k), 1, k))
            inst[rng.choice(k, size=n_pos, replace=False)] = label
        feats = means[inst] + spec.std * rng.standard_normal((k, spec.n_features))
        bags.append(InstanceBag(f"bag-{i:05d}", feats, int(label), inst))
    return MilDataset(bags, spec.n_features, spec.n_classes)


def check_mil_assumption(dataset: MilDataset) -> list[str]:
    """Ids of bags whose instance labels contradict their bag label."""
    return [b.id for b in dataset if not b.satisfies_mil_assumption()]


# -- persistence -------------------------------------------------------------

def _header(dataset: MilDataset) -> dict:
    return {
        "format": "sgpmil-dataset",
        "version": FORMAT_VERSION,
        "n_features": dataset.n_features,
        "n_classes": dataset.n_classes,
        "n_bags": len(dataset),
        "class_counts": dataset.class_counts(),
    }


def save_dataset(dataset: MilDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(_header(dataset)) + "\n")
            for bag in dataset:
                rec = {
                    "id": bag.id,
                    "bag_label": bag.bag_label,
                    "features": bag.features.tolist(),
                    "instance_labels": None if bag.instance_labels is None else bag.instance_labels.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
        return path

    def block(obj) -> bytes:
        raw = json.dumps(obj, sort_keys=True).encode("utf-8")
        return struct.pack("<I", len(raw)) + raw

    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION) + block(_header(dataset)))
        for bag in dataset:
            meta = {"id": bag.id, "n_instances": bag.n_instances, "bag_label": bag.bag_label,
                    "has_instance_labels": bag.instance_labels is not None}
            fh.write(block(meta))
            fh.write(bag.features.astype("<f8").tobytes())
            if bag.instance_labels is not None:
                fh.write(bag.instance_labels.astype("<i8").tobytes())
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def json_block(self, what: str) -> dict:
        (n,) = struct.unpack("<I", self.take(4, what + " length"))
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"malformed {what}: {exc}") from None


def _check_header(header: dict) -> tuple[int, int, int]:
    try:
        if header.get("format") != "sgpmil-dataset":
            raise DatasetFormatError(f"not an sgpmil dataset (format={header.get('format')!r})")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}")
        return int(header["n_features"]), int(header["n_classes"]), int(header["n_bags"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DatasetFormatError(f"malformed header: {exc!r}") from None


def _load_jsonl(path: Path) -> MilDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:1: malformed header: {exc}") from None
    d, c, n = _check_header(header)
    bags = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            inst = rec.get("instance_labels")
            feats = np.array(rec["features"], dtype=np.float64).reshape(-1, d)
            bags.append(InstanceBag(str(rec["id"]), feats, int(rec["bag_label"]),
                                    None if inst is None else np.array(inst, dtype=np.int64)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed bag record: {exc}") from None
    if len(bags) != n:
        raise DatasetFormatError(f"{path}: header announces {n} bags, found {len(bags)}")
    return MilDataset(bags, d, c)


def load_dataset(path) -> MilDataset:
    path = Path(path)
    if path.suffix == ".jsonl":
        return _load_jsonl(path)
    reader = _Reader(path.read_bytes())
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not an sgpmil dataset file")
    (version,) = struct.unpack("<I", reader.take(4, "version"))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    d, c, n = _check_header(reader.json_block("header"))
    bags = []
    for i in range(n):
        where = f"{path}: record {i}"
        try:
            meta = reader.json_block("bag metadata")
            k = int(meta["n_instances"])
            feats = np.frombuffer(reader.take(8 * k * d, "features"), dtype="<f8").reshape(k, d)
            inst = None
            if meta["has_instance_labels"]:
                inst = np.frombuffer(reader.take(8 * k, "instance labels"), dtype="<i8")
            bags.append(InstanceBag(str(meta["id"]), feats.astype(np.float64), int(meta["bag_label"]),
                                    None if inst is None else inst.astype(np.int64)))
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"{where}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{where}: malformed bag record: {exc!r}") from None
    if reader.pos != len(reader.buf):
        raise DatasetFormatError(f"{path}: {len(reader.buf) - reader.pos} trailing bytes after last record")
    return MilDataset(bags, d, c)


# -- splits ------------------------------------------------------------------

def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [round(n * f, 9) for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(dataset: MilDataset, fractions=(0.8, 0.05, 0.15),
                  seed: int = 0) -> tuple[MilDataset, MilDataset, MilDataset]:
    """Stratified train/val/test split; each part keeps the original bag order."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_parts = sum(f > 0 for f in fractions)
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    parts: list[list[int]] = [[], [], []]
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        if len(idx) < n_parts:
            raise StratificationError(
                f"class {c} has {len(idx)} bags, fewer than the {n_parts} non-empty split parts")
        idx = rng.permutation(idx)
        start = 0
        for part, count in zip(parts, _allocate(len(idx), fractions)):
            part.extend(idx[start:start + count].tolist())
            start += count
    return tuple(dataset.subset(sorted(p)) for p in parts)
