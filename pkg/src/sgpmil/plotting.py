"""Report figures rendered straight to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _figure(width=5.0, height=3.2) -> Figure:
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    return path


def uncertainty_boxplot(records, path) -> Path:
    """Predicted-class std for correctly vs incorrectly classified bags."""
    right = [r.predicted_std for r in records if r.correct]
    wrong = [r.predicted_std for r in records if not r.correct]
    fig = _figure(4.0, 3.2)
    ax = fig.add_subplot()
    groups = [g if g else [np.nan] for g in (right, wrong)]
    ax.boxplot(groups, widths=0.5)
    ax.set_xticks([1, 2], [f"correct (n={len(right)})", f"incorrect (n={len(wrong)})"])
    ax.set_ylabel("std of predicted-class probability")
    return _save(fig, path)


def reliability_diagram(mean_probs, labels, path, n_bins: int = 15) -> Path:
    """Equal-mass bins of top-class confidence against observed accuracy."""
    p = np.asarray(mean_probs, dtype=np.float64)
    y = np.asarray(labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    order = np.lexsort((correct, conf))
    xs, ys = [], []
    for chunk in np.array_split(order, min(n_bins, len(order))):
        xs.append(conf[chunk].mean())
        ys.append(correct[chunk].mean())
    fig = _figure(3.6, 3.6)
    ax = fig.add_subplot()
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.plot(xs, ys, marker="o", ms=3, lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    return _save(fig, path)


def attention_histogram(records, path, bins: int = 30) -> Path:
    """Per-bag min-max normalized attention, split by instance label when known."""
    pos, neg = [], []
    for r in records:
        a = np.asarray(r.attention_mean, dtype=np.float64)
        span = a.max() - a.min()
        a = (a - a.min()) / span if span > 0 else np.zeros_like(a)
        if r.instance_labels is None:
            neg.append(a)
        else:
            pos.append(a[r.instance_labels != 0])
            neg.append(a[r.instance_labels == 0])
    fig = _figure()
    ax = fig.add_subplot()
    edges = np.linspace(0, 1, bins + 1)
    neg = np.concatenate(neg) if neg else np.zeros(0)
    pos = np.concatenate(pos) if pos else np.zeros(0)
    ax.hist(neg, bins=edges, alpha=0.6, density=True, label="negative instances")
    if pos.size:
        ax.hist(pos, bins=edges, alpha=0.6, density=True, label="positive instances")
    ax.set_xlabel("normalized attention")
    ax.set_ylabel("density")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def loss_curve(epoch_losses: Sequence[float], path) -> Path:
    fig = _figure(4.0, 3.0)
    ax = fig.add_subplot()
    ax.plot(np.arange(1, len(epoch_losses) + 1), epoch_losses, marker="o", ms=3, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    return _save(fig, path)


def ablation_plot(rows: Sequence[dict], metric: str, path) -> Path:
    """Bar per grid cell with the across-seed standard deviation as error bar."""
    labels = [r["cell"] for r in rows]
    means = [r.get(f"{metric}_mean", np.nan) for r in rows]
    stds = [r.get(f"{metric}_std", 0.0) for r in rows]
    fig = _figure(max(4.0, 0.9 * len(rows) + 1.5), 3.4)
    ax = fig.add_subplot()
    x = np.arange(len(rows))
    ax.bar(x, [np.nan if m is None else m for m in means],
           yerr=[0.0 if s is None else s for s in stds], capsize=3, width=0.6)
    ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    return _save(fig, path)
