"""MIL head around the attention SGP, plus the gated-attention baseline.

Pipeline for one bag with K instances::

    features (K, D) -> projector -> H (K, d')
    H -> q(A) -> N_s attention samples -> normalize -> A (N_s, K)
    A @ H -> bag representations (N_s, d') -> classifier -> p (N_s, C)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import InstanceBag
from .errors import InvalidArgumentError
from .kernel import DTYPE, as_tensor
from .sgp_attention import (
    NORMALIZATIONS,
    AttentionPosterior,
    SgpAttention,
    normalize_attention,
    sample_attention,
    variational_marginal,
)


def _linear(n_in: int, n_out: int, generator: torch.Generator, bias: bool = True) -> torch.nn.Linear:
    layer = torch.nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        layer.weight.copy_((torch.rand(n_out, n_in, dtype=DTYPE, generator=generator) * 2 - 1) * bound)
        if bias:
            layer.bias.zero_()
    return layer


class Projector(torch.nn.Module):
    """D -> hidden (ReLU) -> d' (tanh)."""

    def __init__(self, n_features: int, hidden_dim: int, proj_dim: int, generator: torch.Generator):
        super().__init__()
        self.fc1 = _linear(n_features, hidden_dim, generator)
        self.fc2 = _linear(hidden_dim, proj_dim, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc2(torch.relu(self.fc1(x))))


@dataclass
class BagForward:
    projected: torch.Tensor
    posterior: Optional[AttentionPosterior]
    attention_samples: torch.Tensor
    bag_reps: torch.Tensor
    logits: torch.Tensor
    prob_samples: torch.Tensor

    @property
    def log_prob_samples(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)


class MilModel(torch.nn.Module):
    kind = "sgpmil"

    def __init__(self, n_features: int, n_classes: int, hidden_dim: int = 256, proj_dim: int = 64,
                 n_inducing: int = 16, normalization: str = "sigmoid", use_lm: bool = True,
                 diag_only: bool = True, n_samples: int = 4, seed: int = 0):
        super().__init__()
        if normalization not in NORMALIZATIONS:
            raise InvalidArgumentError(f"unknown normalization {normalization!r}")
        if n_classes < 2:
            raise InvalidArgumentError("need at least two classes")
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.normalization = normalization
        self.n_samples = n_samples
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.projector = Projector(n_features, hidden_dim, proj_dim, gen)
        self.sgp = SgpAttention(proj_dim, n_inducing, use_lm=use_lm, diag_only=diag_only, generator=gen)
        self.classifier = _linear(proj_dim, n_classes, gen)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "hidden_dim": self.hidden_dim,
            "proj_dim": self.proj_dim,
            "n_inducing": self.sgp.inducing_locations.shape[0],
            "normalization": self.normalization,
            "use_lm": self.sgp.use_lm,
            "diag_only": self.sgp.diag_only,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    def forward_bag(self, features, n_samples: Optional[int] = None, rng=None, noise=None,
                    zero_variance: bool = False) -> BagForward:
        return forward_bag(features, self, n_samples, rng, noise=noise, zero_variance=zero_variance)


def _features(bag_or_features) -> torch.Tensor:
    if isinstance(bag_or_features, InstanceBag):
        return torch.from_numpy(bag_or_features.features)
    return as_tensor(bag_or_features)


def project_instances(features, model) -> torch.Tensor:
    x = as_tensor(features)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise InvalidArgumentError(f"features must be (K, {model.n_features}), got {tuple(x.shape)}")
    return model.projector(x)


def aggregate_bag(projected, attention_samples) -> torch.Tensor:
    """Row ``s`` is ``sum_k attention_samples[s, k] * projected[k]``."""
    h, a = as_tensor(projected), as_tensor(attention_samples)
    if a.ndim != 2 or h.ndim != 2 or a.shape[1] != h.shape[0]:
        raise InvalidArgumentError(
            f"attention {tuple(a.shape)} does not match projected instances {tuple(h.shape)}")
    return a @ h


def classify(bag_reps, model) -> torch.Tensor:
    return _softmax(_logits(bag_reps, model))


def _logits(bag_reps, model) -> torch.Tensor:
    r = as_tensor(bag_reps)
    if r.ndim != 2 or r.shape[1] != model.classifier.in_features:
        raise InvalidArgumentError(
            f"bag representations must be (N, {model.classifier.in_features}), got {tuple(r.shape)}")
    return model.classifier(r)


def _softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - torch.max(logits, dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / torch.sum(e, dim=-1, keepdim=True)


def forward_bag(bag, model: MilModel, n_samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                noise=None, zero_variance: bool = False) -> BagForward:
    """Full stochastic forward pass for one bag.

    Noise comes from ``rng.standard_normal((n_samples, K))`` unless ``noise``
    is given. ``zero_variance`` drops the posterior spread (mean attention).
    """
    if getattr(model, "kind", None) == "abmil":
        return model.forward_bag(bag)
    n_samples = model.n_samples if n_samples is None else n_samples
    projected = project_instances(_features(bag), model)
    post = variational_marginal(projected, model.sgp.state())
    if zero_variance:
        noise = torch.zeros(n_samples, projected.shape[0], dtype=DTYPE)
    raw = sample_attention(post, n_samples, rng=rng, noise=noise)
    attention = normalize_attention(raw, model.normalization)
    reps = aggregate_bag(projected, attention)
    logits = _logits(reps, model)
    return BagForward(projected, post, attention, reps, logits, _softmax(logits))


# -- gated-attention baseline -------------------------------------------------

def gated_attention_baseline(features, v_weight, u_weight, w_weight, v_bias=None, u_bias=None) -> torch.Tensor:
    """Attention weights ``softmax_k( w . (tanh(V h_k + b_V) * sigmoid(U h_k + b_U)) )``."""
    h = as_tensor(features)
    v, u, w = as_tensor(v_weight), as_tensor(u_weight), as_tensor(w_weight).reshape(-1)
    if h.ndim != 2 or v.shape != u.shape or v.shape[1] != h.shape[1] or w.shape[0] != v.shape[0]:
        raise InvalidArgumentError("gated attention parameter shapes do not match the features")
    gate_v = h @ v.T + (0 if v_bias is None else as_tensor(v_bias))
    gate_u = h @ u.T + (0 if u_bias is None else as_tensor(u_bias))
    scores = (torch.tanh(gate_v) * torch.sigmoid(gate_u)) @ w
    return normalize_attention(scores[None, :], "softmax")[0]


class GatedAttentionMil(torch.nn.Module):
    """Deterministic gated-attention MIL on the same projector and classifier."""

    kind = "abmil"

    def __init__(self, n_features: int, n_classes: int, hidden_dim: int = 256, proj_dim: int = 64,
                 attention_dim: int = 32, seed: int = 0, **_ignored):
        super().__init__()
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.attention_dim = attention_dim
        self.seed = seed
        self.n_samples = 1
        gen = torch.Generator().manual_seed(seed)
        self.projector = Projector(n_features, hidden_dim, proj_dim, gen)
        self.attn_v = _linear(proj_dim, attention_dim, gen)
        self.attn_u = _linear(proj_dim, attention_dim, gen)
        self.attn_w = _linear(attention_dim, 1, gen, bias=False)
        self.classifier = _linear(proj_dim, n_classes, gen)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "hidden_dim": self.hidden_dim,
            "proj_dim": self.proj_dim,
            "attention_dim": self.attention_dim,
            "seed": self.seed,
        }

    def forward_bag(self, bag, n_samples=None, rng=None, noise=None, zero_variance=False) -> BagForward:
        projected = project_instances(_features(bag), self)
        attention = gated_attention_baseline(projected, self.attn_v.weight, self.attn_u.weight,
                                             self.attn_w.weight, self.attn_v.bias, self.attn_u.bias)[None, :]
        reps = aggregate_bag(projected, attention)
        logits = _logits(reps, self)
        return BagForward(projected, None, attention, reps, logits, _softmax(logits))


def build_model(kind: str, **kwargs) -> torch.nn.Module:
    if kind == "sgpmil":
        kwargs.pop("attention_dim", None)
        kwargs.pop("kind", None)
        return MilModel(**kwargs)
    if kind == "abmil":
        kwargs.pop("kind", None)
        return GatedAttentionMil(**kwargs)
    raise InvalidArgumentError(f"unknown model kind {kind!r}")
