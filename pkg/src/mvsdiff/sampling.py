"""Depth-hypothesis generation in normalized inverse-depth space.

Hypothesis volumes are tensors shaped (B, D, H, W), strictly non-decreasing
along D and clamped to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class SamplingConfig:
    r_init: float
    lambda_min: float
    lambda_max: float
    num_samples: int

    def __post_init__(self):
        if not self.r_init > 0:
            raise ValueError("r_init must be positive")
        if not 0 < self.lambda_min < 1 < self.lambda_max:
            raise ValueError("need 0 < lambda_min < 1 < lambda_max")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")

    @property
    def r_min(self) -> float:
        return self.lambda_min * self.r_init

    @property
    def r_max(self) -> float:
        return self.lambda_max * self.r_init


def init_hypotheses(depth_range, num: int, shape, batch: int = 1, dtype=torch.float32) -> torch.Tensor:
    """``num`` hypotheses uniform in inverse depth over the whole range.

    Returned in normalized inverse space, so they are simply
    ``linspace(0, 1, num)`` (0 is d_max, 1 is d_min) for every pixel.
    ``depth_range`` is only validated; the normalized values do not depend on it.
    """
    d_min, d_max = depth_range
    if not 0 < d_min < d_max:
        raise ValueError(f"invalid depth range {depth_range}")
    if num < 2:
        raise ValueError("need at least 2 initial hypotheses")
    H, W = shape
    return torch.linspace(0, 1, num, dtype=dtype).view(1, num, 1, 1).expand(batch, num, H, W).contiguous()


def confidence_range(conf: torch.Tensor, cfg: SamplingConfig, first_iteration: bool) -> torch.Tensor:
    """Per-pixel half-width of the local search window.

    The first iteration uses ``r_init`` everywhere; later ones interpolate
    linearly between ``r_max`` (confidence 0) and ``r_min`` (confidence 1).
    """
    if first_iteration or conf is None:
        return torch.full_like(conf, cfg.r_init) if conf is not None else torch.tensor(cfg.r_init)
    return (1 - conf) * (cfg.r_max - cfg.r_min) + cfg.r_min


def sample_local(center: torch.Tensor, radius, num: int) -> torch.Tensor:
    """``num`` samples uniform over ``[center - radius, center + radius]``, clamped to [0, 1].

    center: (B, 1, H, W) or (B, H, W). ``num == 1`` returns the center itself.
    For odd ``num`` the middle sample equals the center exactly.
    """
    if center.ndim == 3:
        center = center.unsqueeze(1)
    if num == 1:
        return center.clamp(0, 1)
    radius = torch.as_tensor(radius, dtype=center.dtype, device=center.device)
    if radius.ndim == 3:
        radius = radius.unsqueeze(1)
    steps = torch.arange(num, dtype=center.dtype, device=center.device) * 2 / (num - 1) - 1
    if num % 2 == 1:
        steps[num // 2] = 0.0
    hyps = center + radius * steps.view(1, num, 1, 1)
    return hyps.clamp(0, 1)
