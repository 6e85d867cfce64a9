"""Depth, confidence-weighted and sequence losses, all in normalized inverse-depth space."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 0.05
    beta: float = 0.9

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be positive")


def _masked_mean(x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if valid is None:
        return x.mean()
    valid = valid.to(x.dtype)
    n = valid.sum()
    if n == 0:
        log.warning("empty supervision mask; loss set to 0")
        return (x * 0).sum()
    return (x * valid).sum() / n


def depth_loss(dbar, dbar_gt, valid=None) -> torch.Tensor:
    """Mean absolute error over valid pixels."""
    return _masked_mean((dbar - dbar_gt).abs(), valid)


def conf_loss(dbar, dbar_gt, conf, lambda_c: float = 0.05, valid=None) -> torch.Tensor:
    """|err| / (1 - C) + λ_C log(1 - C), averaged over valid pixels."""
    one_minus = (1 - conf).clamp_min(1e-6)
    per_pixel = (dbar - dbar_gt).abs() / one_minus + lambda_c * torch.log(one_minus)
    return _masked_mean(per_pixel, valid)


def sequence_weights(J: int, beta: float) -> list[float]:
    return [beta ** (J - j) for j in range(1, J + 1)]


def total_loss(losses, beta: float = 0.9):
    """Σ_j β^(J-j) L_j over losses ordered from first to last estimate."""
    if len(losses) < 1:
        raise ValueError("need at least one loss term")
    return sum(w * l for w, l in zip(sequence_weights(len(losses), beta), losses))
