"""Command-line entry point.

Config precedence, lowest to highest: built-in defaults, the ``--config``
YAML file, ``--set section.key=value`` overrides, then dedicated flags such
as ``--seed``. Every command that produces files writes the fully resolved
config next to them.

Errors print one line ``error: <ErrorClass>: <message>`` to stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import plotting
from .data import check_mil_assumption, load_dataset, save_dataset
from .errors import ConfigError, DegenerateInputError, SgpmilError, TrainingAborted
from .evaluation import evaluate, inducing_label_map, predict
from .experiment import METRIC_KEYS, RunConfig, make_dataset, make_splits, parse_grid, run_ablation
from .serialization import load_model, save_model
from .trainer import finite_difference_check, gradient_fixture, train

log = logging.getLogger("sgpmil")


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    rc = rc.with_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        rc = rc.with_overrides([f"seed={args.seed}"])
    return rc.resolved()


def _write_config(rc: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rc.to_yaml(), encoding="utf-8")


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def _write_csv(path: Path, rows: list[dict], columns=None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    dataset = make_dataset(rc)
    bad = check_mil_assumption(dataset)
    if bad:
        raise DegenerateInputError(f"{len(bad)} generated bags violate the bag-label rule")
    out = save_dataset(dataset, args.out)
    _write_config(rc, _sibling(out, ".config.yaml"))
    counts = dataset.class_counts()
    print(f"wrote {out}: {len(dataset)} bags, class counts {counts}, "
          f"{sum(b.n_instances for b in dataset)} instances")
    return 0


def cmd_split(args) -> int:
    rc = _run_config(args)
    dataset = load_dataset(args.data)
    parts = make_splits(rc, dataset)
    out_dir = Path(args.out_dir)
    suffix = Path(args.data).suffix or ".bin"
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, out_dir / f"{name}{suffix}")
        print(f"{name}: {len(part)} bags, class counts {part.class_counts()}")
    _write_config(rc, out_dir / "split.config.yaml")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val_data) if args.val_data else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(rc, out_dir / "config.yaml")
    model, history = train(train_set, rc.train, val_set=val_set, log_path=out_dir / "history.jsonl")
    save_model(model, out_dir / "model.json")
    if rc.eval.figures:
        plotting.loss_curve(history.epoch_mean_loss(), out_dir / "loss.png")
    losses = history.epoch_mean_loss()
    print(f"trained {model.kind} for {len(losses)} epochs: mean loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"wrote {out_dir / 'model.json'} and {out_dir / 'history.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    rc = _run_config(args)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    if not len(dataset):
        raise DegenerateInputError(f"{args.data} contains no bags to evaluate")
    report, records = evaluate(model, dataset, n_samples=rc.eval.n_samples, seed=rc.eval.seed,
                               n_bins=rc.eval.n_bins)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(rc, out_dir / "eval.config.yaml")
    (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    _write_csv(out_dir / "metrics.csv", [report.to_dict()])
    n_classes = dataset.n_classes
    rows = [{"bag_id": r.bag_id, "true_label": r.true_label, "predicted": r.predicted,
             "correct": int(r.correct), "predicted_std": r.predicted_std,
             **{f"p{c}": float(r.mean_probs[c]) for c in range(n_classes)}} for r in records]
    _write_csv(out_dir / "predictions.csv", rows)
    if rc.eval.figures and not args.no_figures:
        fig_dir = out_dir / "figures"
        probs = np.stack([r.mean_probs for r in records])
        labels = [r.true_label for r in records]
        plotting.reliability_diagram(probs, labels, fig_dir / "reliability.png", rc.eval.n_bins)
        plotting.uncertainty_boxplot(records, fig_dir / "uncertainty.png")
        plotting.attention_histogram(records, fig_dir / "attention.png")
    for key in ("balanced_acc", "auc", "ace", "instance_auc", "instance_acc_best", "welch_t", "welch_p"):
        v = getattr(report, key)
        print(f"{key}={'NA' if v is None else f'{v:.4f}'}")
    return 0


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    try:
        grid_doc = yaml.safe_load(Path(args.grid).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{args.grid}: not valid YAML: {str(exc).splitlines()[0]}") from None
    cells, grid_seeds = parse_grid(grid_doc)
    n_seeds = args.n_seeds or grid_seeds or 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(rc, out_dir / "config.yaml")
    (out_dir / "grid.yaml").write_text(
        yaml.safe_dump({"cells": cells, "n_seeds": n_seeds}, sort_keys=False), encoding="utf-8")

    def progress(row):
        print(f"{row['cell']} seed={row['seed']} auc={_fmt(row['auc'])} instance_auc={_fmt(row['instance_auc'])}")

    summary, runs = run_ablation(rc, cells, n_seeds, progress=progress)
    axis_keys = list(dict.fromkeys(k for c in cells for k in c))
    metric_cols = [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")]
    _write_csv(out_dir / "ablation.csv", summary, ["cell", *axis_keys, "n_seeds", *metric_cols])
    _write_csv(out_dir / "ablation_runs.csv", runs, ["cell", *axis_keys, "seed", *METRIC_KEYS])
    if rc.eval.figures:
        plotting.ablation_plot(summary, "auc", out_dir / "ablation_auc.png")
        plotting.ablation_plot(summary, "instance_auc", out_dir / "ablation_instance_auc.png")
    print(f"wrote {out_dir / 'ablation.csv'} ({len(summary)} cells x {n_seeds} seeds)")
    return 0


def cmd_export_attention(args) -> int:
    rc = _run_config(args)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    n_samples = args.n_samples or rc.eval.n_samples
    records = predict(model, dataset, n_samples=n_samples, seed=rc.eval.seed)
    assignments = inducing_label_map(dataset, model).assignments if model.kind == "sgpmil" else None
    rows = []
    for i, (bag, rec) in enumerate(zip(dataset, records)):
        a = rec.attention_mean
        span = a.max() - a.min()
        norm = (a - a.min()) / span if span > 0 else np.zeros_like(a)
        for k in range(bag.n_instances):
            rows.append({
                "bag_id": bag.id, "instance": k,
                "attention_mean": float(a[k]), "attention_std": float(rec.attention_std[k]),
                "attention_norm": float(norm[k]),
                "instance_label": None if bag.instance_labels is None else int(bag.instance_labels[k]),
                "inducing_assignment": -1 if assignments is None else int(assignments[i][k]),
            })
    out = Path(args.out)
    _write_csv(out, rows, ["bag_id", "instance", "attention_mean", "attention_std", "attention_norm",
                           "instance_label", "inducing_assignment"])
    _write_config(rc, _sibling(out, ".config.yaml"))
    print(f"wrote {out}: {len(rows)} instances from {len(dataset)} bags")
    return 0


def cmd_gradcheck(args) -> int:
    rc = _run_config(args)
    hook = None
    if args.inject_bug:
        def hook(grads):
            grads["sgp.inducing_locations"].view(-1)[0] += 1e-3
    worst: dict[str, dict] = {}
    for seed in range(rc.seed, rc.seed + args.seeds):
        model, bag, cfg, noise = gradient_fixture(seed, rc.train.normalization, rc.train.diag_only,
                                                  rc.train.use_lm)
        for c in finite_difference_check(bag, model, cfg, noise=noise, h=args.step, grad_hook=hook):
            w = worst.setdefault(c.block, {"block": c.block, "n_coords": c.n_coords, "max_abs_err": 0.0,
                                           "max_rel_err": 0.0, "passed": True})
            w["max_abs_err"] = max(w["max_abs_err"], c.max_abs_err)
            w["max_rel_err"] = max(w["max_rel_err"], c.max_rel_err)
            w["passed"] = w["passed"] and c.passed
    rows = list(worst.values())
    width = max(len(r["block"]) for r in rows)
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status}  {r['block']:<{width}}  n={r['n_coords']:<3d} "
              f"max_rel_err={r['max_rel_err']:.3e}  max_abs_err={r['max_abs_err']:.3e}")
    if args.out:
        _write_csv(Path(args.out), rows, ["block", "n_coords", "max_rel_err", "max_abs_err", "passed"])
    failed = [r["block"] for r in rows if not r["passed"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} parameter blocks pass over {args.seeds} seeds")
    if failed:
        print(f"error: GradientError: finite-difference mismatch in {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# -- parser ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgpmil", description="Sparse-GP attention MIL toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic MIL dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="stratified train/val/test split of a dataset file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model and render report figures")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of configurations over several seeds")
    _common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-seeds", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attention", help="per-instance attention CSV")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check per parameter block")
    _common(p)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--out")
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)     # reduction order, hence bit-exact output, depends on thread count
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {type(exc).__name__}: {exc} ({len(exc.history.steps)} steps logged)", file=sys.stderr)
        return 1
    except (SgpmilError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
