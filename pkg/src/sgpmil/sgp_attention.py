"""Sparse-GP variational posterior over per-instance attention scores.

Given projected instance embeddings ``H`` (K x d'), inducing locations ``Z``
(m x d') and a Gaussian ``q(U) = N(m_U, S)`` over the inducing values, the
marginal over attention scores is Gaussian with

    mean = mu_X + K_XZ K_ZZ^-1 (m_U - mu_U)
    cov  = K_XX - K_XZ K_ZZ^-1 (K_ZZ - S) K_ZZ^-1 K_ZX

where ``mu_X = H w + b`` (linear mean) or the constant ``b``. Sampling uses
only the diagonal of ``cov``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError
from .kernel import (
    DTYPE,
    KernelParams,
    ScaledRBF,
    as_tensor,
    cholesky_psd,
    kernel_diag,
    kernel_matrix,
    softplus_inverse,
    tri_solve,
)

NORMALIZATIONS = ("softmax", "sigmoid")


@dataclass
class SgpAttentionState:
    inducing_locations: torch.Tensor
    variational_mean: torch.Tensor
    variational_cov_factor: torch.Tensor
    prior_mean: torch.Tensor
    lm_weights: torch.Tensor
    lm_bias: torch.Tensor
    kernel: KernelParams
    use_lm: bool = True
    diag_only: bool = True

    def __post_init__(self):
        self.inducing_locations = as_tensor(self.inducing_locations)
        self.variational_mean = as_tensor(self.variational_mean).reshape(-1)
        self.variational_cov_factor = as_tensor(self.variational_cov_factor)
        self.prior_mean = as_tensor(self.prior_mean).reshape(-1)
        self.lm_weights = as_tensor(self.lm_weights).reshape(-1)
        self.lm_bias = as_tensor(self.lm_bias).reshape(())
        m, d = self.inducing_locations.shape
        if m < 1:
            raise InvalidArgumentError("need at least one inducing point")
        if d != self.kernel.dim or self.lm_weights.shape[0] != d:
            raise InvalidArgumentError(
                f"inconsistent projected dimension: Z has {d} columns, kernel {self.kernel.dim}, "
                f"lm_weights {self.lm_weights.shape[0]}")
        if (self.variational_mean.shape[0] != m or self.prior_mean.shape[0] != m
                or tuple(self.variational_cov_factor.shape) != (m, m)):
            raise InvalidArgumentError("variational parameters do not match the number of inducing points")

    @property
    def n_inducing(self) -> int:
        return self.inducing_locations.shape[0]

    @property
    def dim(self) -> int:
        return self.inducing_locations.shape[1]

    @property
    def variational_cov(self) -> torch.Tensor:
        return self.variational_cov_factor @ self.variational_cov_factor.T


@dataclass
class AttentionPosterior:
    mean: torch.Tensor
    variance: torch.Tensor
    covariance: Optional[torch.Tensor] = None
    diag_only: bool = True
    jitter: float = 0.0
    n_clamped: int = 0

    @property
    def n_instances(self) -> int:
        return self.mean.shape[0]


class SgpAttention(torch.nn.Module):
    """Learnable parameters of the attention SGP.

    The covariance factor is stored unconstrained; its strict lower triangle is
    used as is and its diagonal goes through softplus, so ``S = L L^T`` stays
    positive definite under any gradient step. The prior mean is a fixed zero
    buffer.
    """

    def __init__(self, dim: int, n_inducing: int, use_lm: bool = True, diag_only: bool = True,
                 init_cov_scale: float = 0.1, generator: Optional[torch.Generator] = None):
        super().__init__()
        if n_inducing < 1 or dim < 1:
            raise InvalidArgumentError("dim and n_inducing must be positive")
        self.use_lm = use_lm
        self.diag_only = diag_only
        z = 0.5 * torch.randn(n_inducing, dim, dtype=DTYPE, generator=generator)
        self.inducing_locations = torch.nn.Parameter(z)
        self.variational_mean = torch.nn.Parameter(torch.zeros(n_inducing, dtype=DTYPE))
        raw = torch.zeros(n_inducing, n_inducing, dtype=DTYPE)
        raw.diagonal().fill_(float(softplus_inverse(torch.tensor(init_cov_scale))))
        self.raw_cov_factor = torch.nn.Parameter(raw)
        self.lm_weights = torch.nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.lm_bias = torch.nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.kernel = ScaledRBF(dim)
        self.register_buffer("prior_mean", torch.zeros(n_inducing, dtype=DTYPE))

    def cov_factor(self) -> torch.Tensor:
        raw = self.raw_cov_factor
        return torch.tril(raw, -1) + torch.diag(F.softplus(torch.diagonal(raw)))

    def set_cov_factor(self, factor) -> None:
        """Load a lower-triangular factor with positive diagonal into the raw parameter."""
        factor = as_tensor(factor)
        if bool(torch.any(torch.diagonal(factor) <= 0)):
            raise InvalidArgumentError("covariance factor needs a positive diagonal")
        raw = torch.tril(factor, -1) + torch.diag(softplus_inverse(torch.diagonal(factor)))
        with torch.no_grad():
            self.raw_cov_factor.copy_(raw)

    def state(self) -> SgpAttentionState:
        return SgpAttentionState(
            inducing_locations=self.inducing_locations,
            variational_mean=self.variational_mean,
            variational_cov_factor=self.cov_factor(),
            prior_mean=self.prior_mean,
            lm_weights=self.lm_weights,
            lm_bias=self.lm_bias,
            kernel=self.kernel.params(),
            use_lm=self.use_lm,
            diag_only=self.diag_only,
        )


def prior_mean_function(h: torch.Tensor, state: SgpAttentionState) -> torch.Tensor:
    if state.use_lm:
        return h @ state.lm_weights + state.lm_bias
    return state.lm_bias.expand(h.shape[0])


def variational_marginal(h_proj, state: SgpAttentionState,
                         diag_only: Optional[bool] = None) -> AttentionPosterior:
    """Closed-form Gaussian marginal ``q(A)`` for one bag."""
    h = as_tensor(h_proj)
    if h.ndim != 2 or h.shape[1] != state.dim:
        raise InvalidArgumentError(
            f"projected instances must be (K, {state.dim}), got {tuple(h.shape)}")
    diag_only = state.diag_only if diag_only is None else diag_only
    kern = state.kernel

    kzz = kernel_matrix(state.inducing_locations, state.inducing_locations, kern)
    lz, lam = cholesky_psd(kzz, kern.jitter_base)
    kzx = kernel_matrix(state.inducing_locations, h, kern)
    w = tri_solve(lz, kzx)                        # Lz^-1 K_ZX
    proj = tri_solve(lz, w, transpose=True)        # K_ZZ^-1 K_ZX
    b = state.variational_cov_factor.T @ proj      # B^T B = K_XZ K_ZZ^-1 S K_ZZ^-1 K_ZX

    mean = prior_mean_function(h, state) + proj.T @ (state.variational_mean - state.prior_mean)

    covariance = None
    if diag_only:
        raw_var = kernel_diag(h, kern) - torch.sum(w * w, dim=0) + torch.sum(b * b, dim=0)
    else:
        covariance = kernel_matrix(h, h, kern) - w.T @ w + b.T @ b
        raw_var = torch.diagonal(covariance)

    negative = raw_var < 0
    n_clamped = int(negative.sum())
    variance = torch.where(negative, torch.zeros_like(raw_var), raw_var)
    return AttentionPosterior(mean=mean, variance=variance, covariance=covariance,
                              diag_only=diag_only, jitter=lam, n_clamped=n_clamped)


def draw_noise(rng: np.random.Generator, n_samples: int, n_instances: int) -> torch.Tensor:
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be at least 1")
    return torch.from_numpy(rng.standard_normal((n_samples, n_instances)))


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt with a zero (not infinite) gradient at exactly 0."""
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))),
                       torch.zeros_like(x))


def sample_attention(post: AttentionPosterior, n_samples: int, rng: Optional[np.random.Generator] = None,
                     noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Reparameterized draws ``mean + sqrt(variance) * eps``, shape (n_samples, K).

    ``eps`` comes from ``rng.standard_normal`` unless ``noise`` is supplied.
    """
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be at least 1")
    if bool(torch.any(post.variance < 0)):
        raise InvalidArgumentError("posterior variance has negative entries")
    if noise is None:
        if rng is None:
            raise InvalidArgumentError("either rng or noise is required")
        noise = draw_noise(rng, n_samples, post.n_instances)
    noise = as_tensor(noise)
    if tuple(noise.shape) != (n_samples, post.n_instances):
        raise InvalidArgumentError(f"noise must have shape {(n_samples, post.n_instances)}")
    return post.mean + safe_sqrt(post.variance) * noise


def kl_inducing(state: SgpAttentionState) -> torch.Tensor:
    """``KL(N(m_U, S) || N(mu_U, K_ZZ))`` via Cholesky factors."""
    kern = state.kernel
    m = state.n_inducing
    kzz = kernel_matrix(state.inducing_locations, state.inducing_locations, kern)
    lz, _ = cholesky_psd(kzz, kern.jitter_base)
    ls = state.variational_cov_factor
    trace = torch.sum(tri_solve(lz, ls) ** 2)
    v = tri_solve(lz, state.prior_mean - state.variational_mean)
    quad = torch.sum(v * v)
    logdet_k = 2.0 * torch.sum(torch.log(torch.diagonal(lz)))
    logdet_s = 2.0 * torch.sum(torch.log(torch.abs(torch.diagonal(ls))))
    return 0.5 * (trace + quad - m + logdet_k - logdet_s)


def normalize_attention(raw, mode: str = "sigmoid") -> torch.Tensor:
    """Row softmax over instances, or elementwise logistic."""
    raw = as_tensor(raw)
    if bool(torch.any(torch.isnan(raw))):
        raise InvalidArgumentError("attention scores contain NaN")
    if mode == "softmax":
        shifted = raw - torch.max(raw, dim=-1, keepdim=True).values.detach()
        e = torch.exp(shifted)
        return e / torch.sum(e, dim=-1, keepdim=True)
    if mode == "sigmoid":
        return torch.sigmoid(raw)
    raise InvalidArgumentError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
