"""Soft-thresholded SDR loss for present targets and the L0 loss for absent ones.

Both operate on (..., L) tensors and return values in dB per signal.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

TAU_ACTIVE = 1e-3
TAU_INACTIVE = 1e-2


@dataclass
class LossConfig:
    tau_active: float = TAU_ACTIVE
    tau_inactive: float = TAU_INACTIVE
    inactive_weight: float = 1.0

    def __post_init__(self):
        if self.tau_active <= 0 or self.tau_inactive <= 0:
            raise ValueError("soft thresholds must be positive")


def _energy(x: torch.Tensor) -> torch.Tensor:
    return torch.sum(x * x, dim=-1)


def loss_active(target: torch.Tensor, estimate: torch.Tensor, tau: float = TAU_ACTIVE) -> torch.Tensor:
    """10 log10(|x|^2 / (|x - x_hat|^2 + tau |x|^2)); bounded above by -10 log10(tau)."""
    if target.shape != estimate.shape:
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(estimate.shape)}")
    ref = _energy(target)
    if torch.any(ref == 0):
        raise ValueError("active loss needs a non-silent reference")
    return 10 * torch.log10(ref / (_energy(target - estimate) + tau * ref))


def loss_inactive(mixture: torch.Tensor, estimate: torch.Tensor, tau: float = TAU_INACTIVE) -> torch.Tensor:
    """10 log10(|x_hat|^2 + tau |y|^2), with y the mixture."""
    if mixture.shape != estimate.shape:
        raise ValueError(f"shape mismatch {tuple(mixture.shape)} vs {tuple(estimate.shape)}")
    mix = _energy(mixture)
    if torch.any(mix == 0):
        raise ValueError("inactive loss needs a non-silent mixture")
    return 10 * torch.log10(_energy(estimate) + tau * mix)


def batch_objective(estimate: torch.Tensor, target: torch.Tensor, mixture: torch.Tensor,
                    active: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Mean over the batch of -L_active (present) and weight * L0 (absent); minimise."""
    cfg = cfg or LossConfig()
    if estimate.shape[0] == 0:
        raise ValueError("empty batch")
    active = active.to(torch.bool)
    terms = []
    if active.any():
        terms.append(-loss_active(target[active], estimate[active], cfg.tau_active))
    if (~active).any():
        terms.append(cfg.inactive_weight * loss_inactive(mixture[~active], estimate[~active], cfg.tau_inactive))
    return torch.cat(terms).sum() / estimate.shape[0]
