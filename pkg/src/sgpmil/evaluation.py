"""Bag-level and instance-level metrics, uncertainty separation and inducing-point label maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import MilDataset
from .errors import DegenerateInputError, InvalidArgumentError
from .mil_head import forward_bag, project_instances
from .stats import WelchResult, welch_ttest

N_ACE_BINS = 15
THRESHOLDS = np.arange(101) / 100.0


@dataclass
class PredictionRecord:
    bag_id: str
    prob_samples: np.ndarray
    mean_probs: np.ndarray
    std_probs: np.ndarray
    predicted: int
    true_label: int
    attention_mean: np.ndarray
    attention_std: np.ndarray
    instance_labels: Optional[np.ndarray] = None

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label

    @property
    def predicted_std(self) -> float:
        return float(self.std_probs[self.predicted])


def predict(model, dataset: MilDataset, n_samples: int = 32, seed: int = 0) -> list[PredictionRecord]:
    """Monte-Carlo predictions; bag ``i`` draws its noise from ``default_rng([seed, i])``."""
    records = []
    with torch.no_grad():
        for i, bag in enumerate(dataset):
            rng = np.random.default_rng([seed, i])
            out = forward_bag(bag, model, n_samples, rng)
            probs = out.prob_samples.numpy()
            attn = out.attention_samples.numpy()
            mean = probs.mean(axis=0)
            records.append(PredictionRecord(
                bag_id=bag.id,
                prob_samples=probs,
                mean_probs=mean,
                std_probs=probs.std(axis=0),
                predicted=int(np.argmax(mean)),
                true_label=bag.bag_label,
                attention_mean=attn.mean(axis=0),
                attention_std=attn.std(axis=0),
                instance_labels=bag.instance_labels,
            ))
    return records


# -- bag-level metrics -------------------------------------------------------

def balanced_accuracy(preds, labels, n_classes: Optional[int] = None) -> float:
    """Mean per-class recall."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or preds.shape != labels.shape:
        raise DegenerateInputError("balanced_accuracy needs equally sized, non-empty inputs")
    classes = range(n_classes) if n_classes is not None else np.unique(labels)
    recalls = []
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise DegenerateInputError(f"class {c} has no support")
        recalls.append(np.mean(preds[mask] == c))
    return float(np.mean(recalls))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [x.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)     # mean of 1-based ranks s+1..e
    return ranks


def auroc(scores, binary_labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(binary_labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("auroc needs both positive and negative examples")
    u = _average_ranks(s)[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auroc(mean_probs, labels, n_classes: Optional[int] = None) -> float:
    """Binary AUC on the positive-class column, or the unweighted one-vs-rest mean."""
    p = np.asarray(mean_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = p.shape[1] if n_classes is None else n_classes
    if n_classes == 2:
        return auroc(p[:, 1], y == 1)
    return float(np.mean([auroc(p[:, c], y == c) for c in range(n_classes)]))


def adaptive_ece(mean_probs, labels, n_bins: int = N_ACE_BINS) -> float:
    """Equal-mass calibration error on top-class confidence.

    Samples are sorted by (confidence, correctness) and cut into ``n_bins``
    bins whose sizes differ by at most one, larger bins first.
    """
    p = np.asarray(mean_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[0] != y.size:
        raise DegenerateInputError("adaptive_ece needs a non-empty (n, C) probability matrix and n labels")
    if n_bins < 1:
        raise InvalidArgumentError("n_bins must be >= 1")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    order = np.lexsort((correct, conf))
    conf, correct = conf[order], correct[order]
    n = conf.size
    bins = min(n_bins, n)
    sizes = np.full(bins, n // bins)
    sizes[: n % bins] += 1
    gaps = []
    start = 0
    for size in sizes:
        sl = slice(start, start + size)
        gaps.append(abs(correct[sl].mean() - conf[sl].mean()))
        start += size
    return float(np.mean(gaps))


# -- instance level ----------------------------------------------------------

def minmax_normalize(a) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1]; a constant map becomes all zeros and is flagged."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a), True
    return (a - lo) / (hi - lo), False


@dataclass
class InstanceEval:
    auc: float
    best_acc: float
    best_threshold: float
    n_instances: int
    n_constant_bags: int


def instance_eval(attention_maps: Sequence, instance_labels: Sequence) -> InstanceEval:
    """Attention means as instance probabilities, pooled over bags.

    Each bag's map is min-max normalized first. AUC uses all pooled
    instances (positive = nonzero label); accuracy is the best balanced
    accuracy over thresholds 0, 0.01, ..., 1 with ``score >= threshold``.
    """
    if len(attention_maps) != len(instance_labels) or not attention_maps:
        raise DegenerateInputError("instance_eval needs one label vector per attention map")
    scores, truth, n_constant = [], [], 0
    for a, y in zip(attention_maps, instance_labels):
        if y is None:
            raise DegenerateInputError("instance labels are missing")
        a = np.asarray(a, dtype=np.float64)
        y = np.asarray(y)
        if a.shape != y.shape:
            raise InvalidArgumentError("attention map and instance labels differ in length")
        norm, constant = minmax_normalize(a)
        n_constant += constant
        scores.append(norm)
        truth.append(y != 0)
    s = np.concatenate(scores)
    t = np.concatenate(truth)
    auc = auroc(s, t)
    pos, neg = t, ~t
    best_acc, best_thr = -1.0, 0.0
    for thr in THRESHOLDS:
        hit = s >= thr
        acc = 0.5 * (hit[pos].mean() + (~hit[neg]).mean())
        if acc > best_acc:
            best_acc, best_thr = float(acc), float(thr)
    return InstanceEval(auc, best_acc, best_thr, int(s.size), n_constant)


def uncertainty_separation(records: Sequence[PredictionRecord]) -> tuple[WelchResult, dict]:
    """Welch test of predicted-class std: misclassified (group 1) vs correct (group 2)."""
    wrong = [r.predicted_std for r in records if not r.correct]
    right = [r.predicted_std for r in records if r.correct]
    result = welch_ttest(wrong, right)
    stats = {
        "incorrect": {"n": len(wrong), "mean": result.mean1, "std": result.std1},
        "correct": {"n": len(right), "mean": result.mean2, "std": result.std2},
    }
    return result, stats


# -- inducing-point label maps -----------------------------------------------

@dataclass
class LabelMap:
    assignments: list[np.ndarray]
    max_similarity: list[np.ndarray]
    top_instances: list[list[tuple[str, int, float]]]
    counts: np.ndarray
    n_zero_norm: int


def cosine_similarity(a, b) -> tuple[np.ndarray, int]:
    """Row-pair cosine similarities; pairs touching a zero vector get 0 and are counted."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    zero = denom == 0
    sim = np.divide(a @ b.T, denom, out=np.zeros_like(denom), where=~zero)
    return sim, int(np.count_nonzero(na == 0) + np.count_nonzero(nb == 0))


def assign_to_prototypes(embeddings, prototypes) -> tuple[np.ndarray, np.ndarray, int]:
    sim, n_zero = cosine_similarity(embeddings, prototypes)
    assign = np.argmax(sim, axis=1)
    return assign, sim, n_zero


def inducing_label_map(dataset: MilDataset, model, top_k: int = 5) -> LabelMap:
    """Assign each projected instance to its most cosine-similar inducing point."""
    if getattr(model, "kind", None) != "sgpmil":
        raise InvalidArgumentError("label maps need a model with inducing points")
    z = model.sgp.inducing_locations.detach().numpy()
    assignments, best, sims, keys = [], [], [], []
    n_zero = 0
    with torch.no_grad():
        for bag in dataset:
            h = project_instances(bag.features, model).numpy()
            assign, sim, nz = assign_to_prototypes(h, z)
            n_zero += nz
            assignments.append(assign)
            best.append(sim[np.arange(sim.shape[0]), assign])
            sims.append(sim)
            keys.extend((bag.id, k) for k in range(h.shape[0]))
    if sims:
        allsim = np.concatenate(sims)
    else:
        allsim = np.zeros((0, z.shape[0]))
    top = []
    for j in range(z.shape[0]):
        order = np.argsort(-allsim[:, j], kind="mergesort")[:top_k]
        top.append([(keys[i][0], keys[i][1], float(allsim[i, j])) for i in order])
    counts = np.bincount(np.concatenate(assignments), minlength=z.shape[0]) if assignments \
        else np.zeros(z.shape[0], dtype=np.int64)
    return LabelMap(assignments, best, top, counts, n_zero)


# -- report ------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_bags: int
    balanced_acc: float
    auc: Optional[float]
    ace: float
    instance_auc: Optional[float] = None
    instance_acc_best: Optional[float] = None
    best_threshold: Optional[float] = None
    welch_t: Optional[float] = None
    welch_p: Optional[float] = None
    welch_df: Optional[float] = None
    mean_std_correct: Optional[float] = None
    mean_std_incorrect: Optional[float] = None
    n_correct: int = 0
    n_incorrect: int = 0
    support: list[int] = field(default_factory=list)
    n_constant_attention_bags: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={'NA' if v is None else v}")
        return "\n".join(lines) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_bags", "balanced_acc", "auc", "ace", "support"],
    "properties": {
        "n_bags": {"type": "integer", "minimum": 1},
        "balanced_acc": {"type": "number", "minimum": 0, "maximum": 1},
        "auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "ace": {"type": "number", "minimum": 0, "maximum": 1},
        "instance_auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "instance_acc_best": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "best_threshold": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "welch_t": {"type": ["number", "null"]},
        "welch_p": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "welch_df": {"type": ["number", "null"]},
        "mean_std_correct": {"type": ["number", "null"], "minimum": 0},
        "mean_std_incorrect": {"type": ["number", "null"], "minimum": 0},
        "n_correct": {"type": "integer", "minimum": 0},
        "n_incorrect": {"type": "integer", "minimum": 0},
        "support": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "n_constant_attention_bags": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def metrics_from_records(records: Sequence[PredictionRecord], n_classes: int, n_bins: int = N_ACE_BINS,
                         instance_metrics: bool = True) -> MetricsReport:
    if not records:
        raise DegenerateInputError("no bags to evaluate")
    probs = np.stack([r.mean_probs for r in records])
    labels = np.array([r.true_label for r in records])
    preds = np.array([r.predicted for r in records])
    support = np.bincount(labels, minlength=n_classes).tolist()
    present = [c for c in range(n_classes) if support[c] > 0]
    bal = balanced_accuracy(preds[np.isin(labels, present)], labels[np.isin(labels, present)])
    try:
        auc = multiclass_auroc(probs, labels, n_classes)
    except DegenerateInputError:
        auc = None
    report = MetricsReport(
        n_bags=len(records), balanced_acc=bal, auc=auc, ace=adaptive_ece(probs, labels, n_bins),
        n_correct=int(np.sum(preds == labels)), n_incorrect=int(np.sum(preds != labels)), support=support)
    if instance_metrics and all(r.instance_labels is not None for r in records):
        try:
            inst = instance_eval([r.attention_mean for r in records], [r.instance_labels for r in records])
            report.instance_auc = inst.auc
            report.instance_acc_best = inst.best_acc
            report.best_threshold = inst.best_threshold
            report.n_constant_attention_bags = inst.n_constant_bags
        except DegenerateInputError:
            pass
    if report.n_correct >= 2 and report.n_incorrect >= 2:
        welch, stats = uncertainty_separation(records)
        report.welch_t = welch.t
        report.welch_p = welch.p
        report.welch_df = welch.df
        report.mean_std_incorrect = stats["incorrect"]["mean"]
        report.mean_std_correct = stats["correct"]["mean"]
    return report


def evaluate(model, dataset: MilDataset, n_samples: int = 32, seed: int = 0, n_bins: int = N_ACE_BINS,
             instance_metrics: bool = True) -> tuple[MetricsReport, list[PredictionRecord]]:
    records = predict(model, dataset, n_samples=n_samples, seed=seed)
    return metrics_from_records(records, dataset.n_classes, n_bins, instance_metrics), records
