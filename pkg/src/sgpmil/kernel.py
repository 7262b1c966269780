"""Scaled RBF kernel and the positive-definite linear algebra built on it.

The kernel is

    k(x, y) = A * exp(-sum_l (x_l - y_l)**2 / theta_l) + C

with an outputscale ``A``, one lengthscale ``theta_l`` per input dimension and
a constant offset ``C``. Note there is no factor 1/2 in the exponent.

All functions accept anything :func:`torch.as_tensor` understands and work in
float64. They are differentiable, so the same code is used for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, NotPositiveDefiniteError, SingularMatrixError

DTYPE = torch.float64

JITTER_BASE = 1e-6
JITTER_STEPS = 5


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def softplus_inverse(y: torch.Tensor) -> torch.Tensor:
    y = as_tensor(y)
    # log(exp(y) - 1) written to stay finite for large y
    return y + torch.log(-torch.expm1(-y))


@dataclass
class KernelParams:
    """Constrained kernel hyperparameters (plain values, not raw parameters)."""

    outputscale: torch.Tensor
    lengthscales: torch.Tensor
    offset: torch.Tensor
    jitter_base: float = JITTER_BASE

    def __post_init__(self):
        self.outputscale = as_tensor(self.outputscale)
        self.lengthscales = as_tensor(self.lengthscales).reshape(-1)
        self.offset = as_tensor(self.offset)
        if not bool(self.outputscale > 0):
            raise InvalidArgumentError("outputscale must be positive")
        if not bool(torch.all(self.lengthscales > 0)):
            raise InvalidArgumentError("lengthscales must be positive")
        if not bool(self.offset >= 0):
            raise InvalidArgumentError("offset must be non-negative")
        if self.jitter_base <= 0:
            raise InvalidArgumentError("jitter_base must be positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


class ScaledRBF(torch.nn.Module):
    """Learnable kernel; raw parameters pass through softplus."""

    def __init__(self, dim: int, outputscale=1.0, lengthscale=None, offset=0.01,
                 jitter_base: float = JITTER_BASE):
        super().__init__()
        if lengthscale is None:
            lengthscale = math.sqrt(dim)
        self.jitter_base = jitter_base
        self.raw_outputscale = torch.nn.Parameter(softplus_inverse(torch.tensor(float(outputscale))))
        self.raw_lengthscales = torch.nn.Parameter(
            softplus_inverse(torch.full((dim,), float(lengthscale), dtype=DTYPE)))
        self.raw_offset = torch.nn.Parameter(softplus_inverse(torch.tensor(float(offset))))

    def params(self) -> KernelParams:
        return KernelParams(
            outputscale=F.softplus(self.raw_outputscale),
            lengthscales=F.softplus(self.raw_lengthscales),
            offset=F.softplus(self.raw_offset),
            jitter_base=self.jitter_base,
        )


def kernel_eval(x, y, params: KernelParams) -> torch.Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 1 or y.ndim != 1 or x.shape[0] != params.dim or y.shape[0] != params.dim:
        raise InvalidArgumentError(
            f"kernel_eval expects vectors of length {params.dim}, got {tuple(x.shape)} and {tuple(y.shape)}")
    d = x - y
    return params.outputscale * torch.exp(-torch.sum(d * d / params.lengthscales)) + params.offset


def kernel_matrix(xa, xb, params: KernelParams) -> torch.Tensor:
    """Gram matrix ``K[i, j] = kernel_eval(xa[i], xb[j])``."""
    xa, xb = as_tensor(xa), as_tensor(xb)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != params.dim or xb.shape[1] != params.dim:
        raise InvalidArgumentError(
            f"kernel_matrix expects (n, {params.dim}) and (m, {params.dim}) inputs, "
            f"got {tuple(xa.shape)} and {tuple(xb.shape)}")
    scale = torch.sqrt(params.lengthscales)
    a = xa / scale
    b = xb / scale
    # explicit differences keep the diagonal exact (no |a|^2 + |b|^2 - 2ab cancellation);
    # the distance gradient is defined as 0 at coincident points
    sq = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist") ** 2
    return params.outputscale * torch.exp(-sq) + params.offset


def kernel_diag(x, params: KernelParams) -> torch.Tensor:
    """Diagonal of ``kernel_matrix(x, x)``, which is ``A + C`` everywhere."""
    x = as_tensor(x)
    return (params.outputscale + params.offset).expand(x.shape[0])


def jitter_ladder(jitter_base: float = JITTER_BASE, steps: int = JITTER_STEPS) -> list[float]:
    return [0.0] + [jitter_base * 10.0 ** i for i in range(steps + 1)]


def cholesky_psd(m, jitter_base: float = JITTER_BASE) -> tuple[torch.Tensor, float]:
    """Lower Cholesky factor of ``m + lam * I`` with the smallest working ``lam``.

    ``lam`` is tried from ``{0, b, 10 b, ..., 1e5 b}``. Returns ``(L, lam)``.
    """
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"cholesky_psd expects a square matrix, got {tuple(m.shape)}")
    with torch.no_grad():
        scale = max(float(torch.max(torch.abs(m))), 1.0) if m.numel() else 1.0
        asym = float(torch.max(torch.abs(m - m.T))) if m.numel() else 0.0
    if asym > 1e-8 * scale:
        raise InvalidArgumentError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    eye = torch.eye(m.shape[0], dtype=m.dtype)
    ladder = jitter_ladder(jitter_base)
    for lam in ladder:
        factor, info = torch.linalg.cholesky_ex(m + lam * eye if lam else m)
        if int(info) == 0:
            return factor, lam
    raise NotPositiveDefiniteError(
        f"Cholesky failed for every jitter in {ladder}", jitter_ladder=ladder)


def tri_solve(lower, b, transpose: bool = False) -> torch.Tensor:
    """Solve ``L X = B`` (or ``L^T X = B``) for lower-triangular ``L``."""
    lower, b = as_tensor(lower), as_tensor(b)
    if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
        raise InvalidArgumentError("tri_solve expects a square triangular matrix")
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.shape[0] != lower.shape[0]:
        raise InvalidArgumentError(
            f"tri_solve shape mismatch: L is {tuple(lower.shape)}, B is {tuple(b.shape)}")
    if bool(torch.any(torch.diagonal(lower) == 0)):
        raise SingularMatrixError("triangular matrix has a zero on its diagonal")
    if transpose:
        x = torch.linalg.solve_triangular(lower.T, b, upper=True)
    else:
        x = torch.linalg.solve_triangular(lower, b, upper=False)
    return x[:, 0] if vector else x
