"""Mask-based convex upsampling: each fine pixel is a softmax-weighted mix of its 3x3 coarse neighborhood."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class UpsampleMask(nn.Module):
    def __init__(self, context_dim: int, ratio: int, hidden: int = 64):
        super().__init__()
        self.ratio = ratio
        self.net = nn.Sequential(
            nn.Conv2d(context_dim, hidden, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, ratio * ratio * 9, 1),
        )

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        # damped logits keep the initial combination close to uniform
        return 0.25 * self.net(context)


def convex_upsample(x: torch.Tensor, mask: torch.Tensor, ratio: int) -> torch.Tensor:
    """x: (B, C, H, W); mask: (B, 9*r*r, H, W) logits -> (B, C, r*H, r*W).

    Borders use replicate padding so the 3x3 window never mixes in zeros.
    """
    B, C, H, W = x.shape
    w = torch.softmax(mask.view(B, 1, 9, ratio, ratio, H, W), dim=2)
    patches = F.unfold(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3).view(B, C, 9, 1, 1, H, W)
    up = (w * patches).sum(2)                                  # (B, C, r, r, H, W)
    return up.permute(0, 1, 4, 2, 5, 3).reshape(B, C, ratio * H, ratio * W)


def upsample_learned(depth: torch.Tensor, context: torch.Tensor, head: UpsampleMask) -> torch.Tensor:
    """Upsample a (B, 1, H, W) normalized inverse depth by ``head.ratio``."""
    return convex_upsample(depth, head(context), head.ratio)
