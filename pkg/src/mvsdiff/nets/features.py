"""Image feature pyramid and reference-view context encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_relu(cin, cout, k=3, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, k // 2), nn.ReLU(inplace=True))


def stage_shape(image_shape, stage: int) -> tuple[int, int]:
    """Resolution of stage ``stage`` (1 = 1/8, 2 = 1/4, 3 = 1/2 of the image)."""
    H, W = image_shape
    f = 2 ** (4 - stage)
    return H // f, W // f


def check_image_shape(H: int, W: int, multiple: int = 16) -> None:
    if H % multiple or W % multiple:
        raise ValueError(f"image size {H}x{W} must be divisible by {multiple}")


@dataclass
class ContextBundle:
    """Per-stage context features (keyed by stage) and initial GRU states (keyed by refinement stage)."""

    context: dict[int, torch.Tensor]
    hidden: dict[int, torch.Tensor]


class FeatureNet(nn.Module):
    """Top-down feature pyramid; ``channels[m-1]`` is the width of stage ``m``."""

    def __init__(self, num_stages: int = 2, channels=(32, 16, 8), base: int = 8):
        super().__init__()
        self.num_stages = num_stages
        self.channels = tuple(channels[:num_stages])
        self.conv0 = nn.Sequential(conv_relu(3, base), conv_relu(base, base))
        self.conv1 = nn.Sequential(conv_relu(base, base * 2, 5, 2), conv_relu(base * 2, base * 2))
        self.conv2 = nn.Sequential(conv_relu(base * 2, base * 4, 5, 2), conv_relu(base * 4, base * 4))
        self.conv3 = nn.Sequential(conv_relu(base * 4, base * 8, 5, 2), conv_relu(base * 8, base * 8))
        top = base * 8
        self.out = nn.ModuleList([nn.Conv2d(top, self.channels[0], 1, bias=False)])
        self.inner = nn.ModuleList()
        lateral = [base * 4, base * 2]
        for m in range(1, num_stages):
            self.inner.append(nn.Conv2d(lateral[m - 1], top, 1))
            self.out.append(nn.Conv2d(top, self.channels[m], 3, padding=1, bias=False))

    def forward(self, img: torch.Tensor) -> dict[int, torch.Tensor]:
        check_image_shape(*img.shape[-2:])
        c0 = self.conv0(img)
        c1 = self.conv1(c0)
        c2 = self.conv2(c1)
        x = self.conv3(c2)
        feats = {1: self.out[0](x)}
        laterals = [c2, c1]
        for m in range(1, self.num_stages):
            x = F.interpolate(x, scale_factor=2, mode="nearest") + self.inner[m - 1](laterals[m - 1])
            feats[m + 1] = self.out[m](x)
        return feats


class ContextNet(nn.Module):
    """Reference-image context encoder.

    Produces context features for stages 1..M and, for each refinement stage
    m >= 2, a tanh-initialized GRU state at a quarter of stage m's resolution
    (the coarsest level of the denoising U-Net).
    """

    def __init__(self, num_stages: int = 2, context_dim: int = 16, hidden_dim: int = 32, base: int = 8):
        super().__init__()
        self.num_stages = num_stages
        self.conv0 = conv_relu(3, base)
        widths = [base * 2, base * 4, base * 6, base * 8]      # 1/2, 1/4, 1/8, 1/16
        layers, cin = [], base
        for w in widths:
            layers.append(nn.Sequential(conv_relu(cin, w, 3, 2), conv_relu(w, w)))
            cin = w
        self.layers = nn.ModuleList(layers)
        # stage m lives at 1/2^(4-m): stage 1 -> layer index 2, stage 2 -> 1, stage 3 -> 0
        self.ctx_out = nn.ModuleDict({
            str(m): nn.Conv2d(widths[3 - m], context_dim, 3, padding=1) for m in range(1, num_stages + 1)
        })
        # refinement stage m: hidden state at 1/2^(6-m): stage 2 -> 1/16, stage 3 -> 1/8
        self.hidden_out = nn.ModuleDict({
            str(m): nn.Conv2d(widths[5 - m], hidden_dim, 3, padding=1) for m in range(2, num_stages + 1)
        })

    def forward(self, img: torch.Tensor) -> ContextBundle:
        check_image_shape(*img.shape[-2:])
        x = self.conv0(img)
        levels = []
        for layer in self.layers:
            x = layer(x)
            levels.append(x)
        context = {m: self.ctx_out[str(m)](levels[3 - m]) for m in range(1, self.num_stages + 1)}
        hidden = {m: torch.tanh(self.hidden_out[str(m)](levels[5 - m])) for m in range(2, self.num_stages + 1)}
        return ContextBundle(context, hidden)


def extract_features(net: FeatureNet, images: torch.Tensor) -> list[dict[int, torch.Tensor]]:
    """Per-view pyramids for images shaped (B, N, 3, H, W)."""
    B, N = images.shape[:2]
    flat = net(images.flatten(0, 1))
    return [{m: f.view(B, N, *f.shape[1:])[:, i] for m, f in flat.items()} for i in range(N)]


def extract_context(net: ContextNet, ref_image: torch.Tensor) -> ContextBundle:
    return net(ref_image)
