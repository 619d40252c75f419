"""Mutual-information regularizer against a frozen oracle and the combined loss.

The variational distribution q(Z_f0 | Z_f) is a Gaussian with mean
``mu(Z_f)`` (an affine map, identity at init) and a diagonal,
input-independent covariance ``diag(softplus(s) + eps)``. Maximizing the
variational lower bound on I(Z_f0; Z_f) amounts to minimizing

    E[ log|Sigma| + (Z_f0 - mu(Z_f))^T Sigma^-1 (Z_f0 - mu(Z_f)) ]

which is averaged over the batch and summed over feature dimensions.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

VAR_EPS = 1e-6


class NumericalError(FloatingPointError):
    def __init__(self, what: str, index: tuple):
        self.index = index
        super().__init__(f"non-finite value in {what} at index {index}")


def _unit_variance_param(d: int, dtype: torch.dtype) -> torch.Tensor:
    """Raw parameters s with softplus(s) + eps == 1 exactly in ``dtype``."""
    one = torch.ones((), dtype=dtype)
    s = torch.log(torch.expm1(torch.tensor(1.0 - VAR_EPS, dtype=torch.float64))).to(dtype)
    for _ in range(64):
        v = F.softplus(s) + VAR_EPS
        if v == one:
            break
        s = torch.nextafter(s, s + (one - v))
    return s.expand(d).clone()


class VariationalHead(nn.Module):
    """Mean encoder and diagonal variance of the Gaussian variational family."""

    def __init__(self, d: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.d = d
        self.mean = nn.Linear(d, d, dtype=dtype)
        with torch.no_grad():
            self.mean.weight.copy_(torch.eye(d, dtype=dtype))
            self.mean.bias.zero_()
        self.var_raw = nn.Parameter(_unit_variance_param(d, dtype))

    def variance(self) -> torch.Tensor:
        return F.softplus(self.var_raw) + VAR_EPS

    def forward(self, z_f: torch.Tensor) -> torch.Tensor:
        return self.mean(z_f)

    @torch.no_grad()
    def set_variance(self, var: torch.Tensor) -> None:
        var = torch.as_tensor(var, dtype=self.var_raw.dtype)
        if torch.any(var <= VAR_EPS):
            raise ValueError(f"variance must exceed {VAR_EPS}")
        self.var_raw.copy_(torch.log(torch.expm1(var - VAR_EPS)).expand_as(self.var_raw))


def _check_finite(t: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(t)
    if bad.any():
        idx = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise NumericalError(what, idx)


def mi_penalty(z_oracle: torch.Tensor, z_f: torch.Tensor, head: VariationalHead) -> torch.Tensor:
    """Batch mean of ``sum_i log var_i + sum_i (z0_i - mu(z_f)_i)^2 / var_i``.

    ``z_oracle`` is detached: no gradient ever reaches the oracle.
    """
    if z_oracle.shape != z_f.shape or z_f.dim() != 2:
        raise ValueError(f"feature shapes must match as (B, d): {tuple(z_oracle.shape)} vs {tuple(z_f.shape)}")
    if z_f.shape[1] != head.d:
        raise ValueError(f"head expects d={head.d}, got features of width {z_f.shape[1]}")
    _check_finite(z_oracle, "oracle features")
    _check_finite(z_f, "target features")
    var = head.variance()
    residual = z_oracle.detach() - head(z_f)
    mahalanobis = (residual.pow(2) / var).sum(dim=1)
    return torch.log(var).sum() + mahalanobis.mean()


def mahalanobis_term(z_oracle: torch.Tensor, z_f: torch.Tensor, head: VariationalHead) -> torch.Tensor:
    """Per-sample squared Mahalanobis distance (always >= 0)."""
    residual = z_oracle.detach() - head(z_f)
    return (residual.pow(2) / head.variance()).sum(dim=1)


def total_loss(logits: torch.Tensor, labels: torch.Tensor, penalty, lam: float) -> torch.Tensor:
    """Mean cross-entropy plus ``lam * penalty``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    n_cls = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in 0..{n_cls - 1}")
    ce = F.cross_entropy(logits, labels)
    if lam == 0:
        return ce
    return ce + lam * penalty
