"""ELBO objective, gradients, the warmup/cosine schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import InstanceBag, MilDataset
from .errors import (
    ConfigError,
    GradientError,
    InvalidArgumentError,
    NotPositiveDefiniteError,
    SingularMatrixError,
    TrainingAborted,
)
from .mil_head import MilModel, build_model, forward_bag, project_instances
from .seeding import rng_stream, stream_seed
from .sgp_attention import NORMALIZATIONS, kl_inducing

log = logging.getLogger(__name__)

LOG_PROB_FLOOR = -30.0


@dataclass
class TrainConfig:
    epochs: int = 20
    peak_lr: float = 6e-4
    warmup_steps: Optional[int] = None     # None: 5% of all steps
    weight_decay: float = 1e-2
    n_samples: int = 4
    n_inducing: int = 16
    normalization: str = "sigmoid"
    use_lm: bool = True
    diag_only: bool = True
    seed: int = 0
    kl_scale: Optional[float] = None       # None: 1 / number of training bags
    model: str = "sgpmil"
    hidden_dim: int = 256
    proj_dim: int = 64
    attention_dim: int = 32
    grad_clip: Optional[float] = 10.0
    eval_samples: int = 32
    zero_variance: bool = False
    sampling_seed: Optional[int] = None    # None: derived from seed

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.n_samples < 1 or self.eval_samples < 1:
            raise ConfigError("n_samples and eval_samples must be >= 1")
        if self.n_inducing < 1:
            raise ConfigError("n_inducing must be >= 1")
        if self.kl_scale is not None and not self.kl_scale > 0:
            raise ConfigError("kl_scale must be positive")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("peak_lr and weight_decay must be non-negative")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        if self.model not in ("sgpmil", "abmil"):
            raise ConfigError("model must be 'sgpmil' or 'abmil'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)

    def resolved(self, n_bags: int) -> "TrainConfig":
        """Copy with the data-dependent defaults filled in."""
        out = TrainConfig(**asdict(self))
        total = self.epochs * max(n_bags, 1)
        if out.warmup_steps is None:
            out.warmup_steps = int(math.ceil(0.05 * total))
        if out.kl_scale is None:
            out.kl_scale = 1.0 / max(n_bags, 1)
        return out


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def loss(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def epoch_mean_loss(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **s}) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}) for e in self.epochs]
        return "\n".join(lines) + "\n"


# -- objective ---------------------------------------------------------------

def elbo_loss(bag: InstanceBag, model, cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
              noise=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``loss = ce + kl_scale * kl`` for one bag; ce is the Monte-Carlo cross-entropy."""
    loss, ce, kl, _ = _elbo(bag, model, cfg, rng, noise)
    return loss, ce, kl


def _elbo(bag, model, cfg, rng, noise):
    if not 0 <= bag.bag_label < model.n_classes:
        raise InvalidArgumentError(f"bag {bag.id!r}: label {bag.bag_label} outside [0, {model.n_classes})")
    out = forward_bag(bag, model, cfg.n_samples, rng, noise=noise, zero_variance=cfg.zero_variance)
    logp = out.log_prob_samples[:, bag.bag_label]
    ce = -torch.mean(torch.clamp(logp, min=LOG_PROB_FLOOR))
    if model.kind == "sgpmil":
        kl = kl_inducing(model.sgp.state())
    else:
        kl = torch.zeros((), dtype=ce.dtype)
    kl_scale = cfg.kl_scale if cfg.kl_scale is not None else 1.0
    return ce + kl_scale * kl, ce, kl, out


def compute_gradients(bag: InstanceBag, model, cfg: TrainConfig, rng=None, noise=None,
                      ) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and exact gradients for every trainable parameter block.

    The sampling noise is drawn once, so the loss is a deterministic
    function of the parameters.
    """
    model.zero_grad(set_to_none=True)
    loss, _, _ = elbo_loss(bag, model, cfg, rng, noise=noise)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not bool(torch.all(torch.isfinite(g))):
            raise GradientError(f"non-finite gradient in {name}", block=name)
        grads[name] = g
    return float(loss.detach()), grads


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise InvalidArgumentError("step must be non-negative")
    warmup = cfg.warmup_steps or 0
    if warmup > 0 and step < warmup:
        return cfg.peak_lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return cfg.peak_lr if step <= warmup else 0.0
    t = min((step - warmup) / span, 1.0)
    return max(0.0, cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t)))


# -- model construction ------------------------------------------------------

def _decayed(name: str) -> bool:
    return name.endswith(".weight") and not name.startswith("sgp.")


def init_model(train_set: MilDataset, cfg: TrainConfig):
    """Seeded model whose inducing locations start at projected training instances."""
    model = build_model(
        cfg.model, n_features=train_set.n_features, n_classes=train_set.n_classes,
        hidden_dim=cfg.hidden_dim, proj_dim=cfg.proj_dim, n_inducing=cfg.n_inducing,
        normalization=cfg.normalization, use_lm=cfg.use_lm, diag_only=cfg.diag_only,
        n_samples=cfg.n_samples, attention_dim=cfg.attention_dim,
        seed=stream_seed(cfg.seed, "init") % 2**31)
    if model.kind == "sgpmil" and len(train_set):
        rng = rng_stream(cfg.seed, "init")
        m = cfg.n_inducing
        chunks, seen = [], 0
        for i in rng.permutation(len(train_set)):
            chunks.append(train_set[int(i)].features)
            seen += chunks[-1].shape[0]
            if seen >= 4 * m:
                break
        if seen >= m:
            with torch.no_grad():
                h = project_instances(np.concatenate(chunks), model)
                pick = np.sort(rng.choice(h.shape[0], size=m, replace=False))
                model.sgp.inducing_locations.copy_(h[torch.from_numpy(pick)])
    return model


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if _decayed(name) else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def train(train_set: MilDataset, cfg: TrainConfig, val_set: Optional[MilDataset] = None,
          log_path=None, model=None, epoch_callback: Optional[Callable] = None):
    """Per-bag AdamW training. Returns ``(model, history)``."""
    from .evaluation import evaluate

    cfg.validate()
    if not len(train_set):
        raise InvalidArgumentError("training set is empty")
    cfg = cfg.resolved(len(train_set))
    if model is None:
        model = init_model(train_set, cfg)
    model.train()
    optimizer = make_optimizer(model, cfg)
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    sampling_rng = rng_stream(cfg.seed if cfg.sampling_seed is None else cfg.sampling_seed, "sampling")
    total_steps = cfg.epochs * len(train_set)
    history = TrainHistory()
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")

    def emit(kind, rec):
        if log_fh is not None:
            log_fh.write(json.dumps({"type": kind, **rec}) + "\n")

    step = 0
    try:
        for epoch in range(cfg.epochs):
            losses, clamped, entries = [], 0, 0
            for idx in shuffle_rng.permutation(len(train_set)):
                bag = train_set[int(idx)]
                lr = lr_at(step, cfg, total_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                noise = None
                if model.kind == "sgpmil":
                    noise = torch.from_numpy(sampling_rng.standard_normal((cfg.n_samples, bag.n_instances)))
                try:
                    loss, ce, kl, out = _elbo(bag, model, cfg, None, noise)
                except (NotPositiveDefiniteError, SingularMatrixError, InvalidArgumentError) as exc:
                    raise TrainingAborted(f"step {step} (bag {bag.id}): {exc}", history=history) from exc
                if out.posterior is not None:
                    clamped += out.posterior.n_clamped
                    entries += bag.n_instances
                rec = {"step": step, "epoch": epoch, "bag": bag.id, "loss": float(loss.detach()),
                       "ce": float(ce.detach()), "kl": float(kl.detach()), "lr": lr}
                if not math.isfinite(rec["loss"]):
                    history.steps.append(rec)
                    emit("step", rec)
                    raise TrainingAborted(f"non-finite loss at step {step} (bag {bag.id})", history=history)
                loss.backward()
                for name, p in model.named_parameters():
                    if p.grad is not None and not bool(torch.all(torch.isfinite(p.grad))):
                        raise TrainingAborted(f"non-finite gradient in {name} at step {step}", history=history)
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                history.steps.append(rec)
                emit("step", rec)
                losses.append(rec["loss"])
                step += 1
            erec = {"epoch": epoch, "mean_loss": float(np.mean(losses))}
            if entries and clamped > 0.01 * entries:
                log.warning("epoch %d: %d of %d marginal variances clamped at 0", epoch, clamped, entries)
            if val_set is not None and len(val_set):
                report, _ = evaluate(model, val_set, n_samples=cfg.eval_samples,
                                     seed=stream_seed(cfg.seed, "eval"), instance_metrics=False)
                erec["val"] = {k: report.to_dict()[k] for k in ("balanced_acc", "auc", "ace")}
            history.epochs.append(erec)
            emit("epoch", erec)
            if epoch_callback is not None:
                epoch_callback(epoch, model, erec)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, history


# -- finite-difference check -------------------------------------------------

@dataclass
class BlockCheck:
    block: str
    n_coords: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


def finite_difference_check(bag: InstanceBag, model, cfg: TrainConfig, noise=None, h: float = 1e-5,
                            rtol: float = 1e-5, atol: float = 1e-8,
                            grad_hook: Optional[Callable[[dict], None]] = None) -> list[BlockCheck]:
    """Compare ``compute_gradients`` with central differences, coordinate by coordinate.

    A coordinate passes when its relative error is below ``rtol`` or its
    absolute error below ``atol``. ``grad_hook`` may edit the analytic
    gradients in place (used to prove the check can fail).
    """
    if noise is None and model.kind == "sgpmil":
        noise = torch.from_numpy(rng_stream(cfg.seed, "gradcheck").standard_normal(
            (cfg.n_samples, bag.n_instances)))
    _, grads = compute_gradients(bag, model, cfg, noise=noise)
    if grad_hook is not None:
        grad_hook(grads)

    def loss_value() -> float:
        with torch.no_grad():
            return float(elbo_loss(bag, model, cfg, noise=noise)[0])

    results = []
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        g = grads[name].view(-1)
        max_abs = max_rel = 0.0
        ok = True
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            abs_err = abs(fd - float(g[i]))
            rel_err = abs_err / max(abs(fd), abs(float(g[i])), 1e-300)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            if not (rel_err < rtol or abs_err < atol):
                ok = False
        results.append(BlockCheck(name, flat.numel(), max_abs, max_rel, ok))
    return results


def _spread_points(rng: np.random.Generator, m: int, d: int, min_dist: float) -> np.ndarray:
    """Uniform points in [-0.8, 0.8]^d, redrawn until no pair is closer than ``min_dist``.

    Near-duplicate inducing points make K_ZZ nearly singular; the loss then
    carries enough rounding noise to swamp a finite-difference reference.
    """
    while True:
        z = rng.uniform(-0.8, 0.8, (m, d))
        gaps = np.linalg.norm(z[:, None] - z[None], axis=-1)[np.triu_indices(m, 1)]
        if gaps.size == 0 or gaps.min() >= min_dist:
            return z


def gradient_fixture(seed: int, normalization: str = "sigmoid", diag_only: bool = True, use_lm: bool = True,
                     n_samples: int = 2):
    """Small seeded problem for gradient checks.

    K=6 instances, D=8 features, hidden 6, projection 3, m=4 inducing points,
    C=3 classes, with every SGP parameter moved off its default and the
    inducing points kept apart. Returns
    ``(model, bag, cfg, noise)``.
    """
    rng = np.random.default_rng(1000 + seed)
    model = MilModel(8, 3, hidden_dim=6, proj_dim=3, n_inducing=4, normalization=normalization,
                     use_lm=use_lm, diag_only=diag_only, n_samples=n_samples, seed=seed)
    with torch.no_grad():
        for p in (model.projector.fc1.bias, model.projector.fc2.bias, model.classifier.bias):
            p.copy_(torch.from_numpy(rng.normal(0, 0.3, p.shape)))
        sgp = model.sgp
        sgp.inducing_locations.copy_(torch.from_numpy(_spread_points(rng, 4, 3, 0.5)))
        sgp.variational_mean.copy_(torch.from_numpy(rng.normal(0, 1, 4)))
        sgp.raw_cov_factor.copy_(torch.from_numpy(np.tril(rng.normal(0, 0.3, (4, 4)))))
        sgp.lm_weights.copy_(torch.from_numpy(rng.normal(0, 1, 3)))
        sgp.lm_bias.fill_(float(rng.normal()))
        sgp.kernel.raw_lengthscales.copy_(torch.from_numpy(rng.uniform(-0.5, 1.0, 3)))
    bag = InstanceBag("fixture", rng.normal(0, 1, (6, 8)), int(rng.integers(3)))
    cfg = TrainConfig(n_samples=n_samples, kl_scale=0.1, normalization=normalization, diag_only=diag_only,
                      use_lm=use_lm, seed=seed, grad_clip=None)
    noise = torch.from_numpy(rng.standard_normal((n_samples, 6)))
    return model, bag, cfg, noise
