"""Lightweight 3D U-Net turning the stage-1 cost volume into a depth probability volume."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3d_relu(cin, cout, stride=1):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class CostRegNet(nn.Module):
    def __init__(self, in_channels: int = 4, base: int = 8):
        super().__init__()
        self.conv0 = conv3d_relu(in_channels, base)
        self.down1 = nn.Sequential(conv3d_relu(base, base * 2, 2), conv3d_relu(base * 2, base * 2))
        self.down2 = nn.Sequential(conv3d_relu(base * 2, base * 4, 2), conv3d_relu(base * 4, base * 4))
        self.up1 = conv3d_relu(base * 4, base * 2)
        self.up0 = conv3d_relu(base * 2, base)
        self.prob = nn.Conv3d(base, 1, 3, 1, 1, bias=False)

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        """(B, G, D, H, W) -> (B, D, H, W) logits."""
        x0 = self.conv0(vol)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x = x1 + self.up1(F.interpolate(x2, size=x1.shape[2:], mode="trilinear", align_corners=False))
        x = x0 + self.up0(F.interpolate(x, size=x0.shape[2:], mode="trilinear", align_corners=False))
        return self.prob(x).squeeze(1)


def regularize_init(vol: torch.Tensor, net: CostRegNet) -> torch.Tensor:
    """Probability volume (B, D, H, W): softmax over hypotheses of the regularized cost."""
    return torch.softmax(net(vol), dim=1)
