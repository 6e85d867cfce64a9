"""Condition encoder and the denoising 2D U-Net with a convolutional GRU at its coarsest level."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import conv_relu


def timestep_embedding(t: torch.Tensor, dim: int = 64, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (B,) timesteps -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    return emb.to(t.dtype if t.is_floating_point() else torch.get_default_dtype())


class ConvGRU(nn.Module):
    def __init__(self, hidden_dim: int, input_dim: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.convz = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel, padding=pad)
        self.convr = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel, padding=pad)
        self.convq = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel, padding=pad)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class ConditionEncoder(nn.Module):
    """Encodes the local cost volume, the sampled hypotheses and the image context.

    The ``use_*`` switches zero the corresponding input so the ablated model
    keeps the same shape and parameter count.
    """

    def __init__(self, num_samples: int, groups: int, context_dim: int, width: int = 32,
                 use_cost=True, use_depth_context=True, use_image_context=True):
        super().__init__()
        self.use_cost = use_cost
        self.use_depth_context = use_depth_context
        self.use_image_context = use_image_context
        self.cost = nn.Sequential(conv_relu(num_samples * groups, width), conv_relu(width, width))
        self.depth = nn.Sequential(conv_relu(num_samples, width // 2), conv_relu(width // 2, width // 2))
        self.fuse = conv_relu(width + width // 2, width)
        self.out_dim = width + 1 + context_dim

    def forward(self, local_cost, hyps, prev_depth, context):
        if not self.use_cost:
            local_cost = torch.zeros_like(local_cost)
        if not self.use_depth_context:
            hyps = torch.zeros_like(hyps)
        if not self.use_image_context:
            context = torch.zeros_like(context)
        x = self.fuse(torch.cat([self.cost(local_cost), self.depth(hyps)], dim=1))
        return torch.cat([x, prev_depth, context], dim=1)


def encode_condition(encoder: ConditionEncoder, local_cost, hyps, prev_depth, context):
    return encoder(local_cost, hyps, prev_depth, context)


class DenoiseOutput(NamedTuple):
    delta: torch.Tensor         # (B, 1, H, W) residual update
    confidence: torch.Tensor    # (B, 1, H, W) in (0, 1)
    hidden: torch.Tensor | None


class DenoiseUNet(nn.Module):
    """Three-level 2D U-Net; the coarsest level is a ConvGRU when ``use_gru``.

    The input is the condition feature concatenated with the current residual
    estimate. The residual-update head is zero-initialized so an untrained
    network leaves the residual unchanged.
    """

    def __init__(self, in_dim: int, width: int = 32, hidden_dim: int = 32, temb_dim: int = 64,
                 use_gru: bool = True):
        super().__init__()
        self.use_gru = use_gru
        self.temb_dim = temb_dim
        w1, w2, w3 = width, width * 3 // 2, width * 2
        self.temb = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.enc1 = nn.Sequential(conv_relu(in_dim, w1), conv_relu(w1, w1))
        self.enc2 = nn.Sequential(conv_relu(w1, w2, 3, 2), conv_relu(w2, w2))
        self.enc3 = conv_relu(w2, w3, 3, 2)
        self.t1, self.t2, self.t3 = nn.Linear(temb_dim, w1), nn.Linear(temb_dim, w2), nn.Linear(temb_dim, w3)
        if use_gru:
            self.gru = ConvGRU(hidden_dim, w3)
        else:
            self.mid = conv_relu(w3, hidden_dim)
        self.dec2 = conv_relu(hidden_dim + w2, w2)
        self.dec1 = conv_relu(w2 + w1, w1)
        self.td2, self.td1 = nn.Linear(temb_dim, w2), nn.Linear(temb_dim, w1)
        self.delta_head = nn.Conv2d(w1, 1, 3, padding=1)
        self.conf_head = nn.Conv2d(w1, 1, 3, padding=1)
        nn.init.zeros_(self.delta_head.weight)
        nn.init.zeros_(self.delta_head.bias)

    def forward(self, x, h_prev, t) -> DenoiseOutput:
        emb = self.temb(timestep_embedding(t, self.temb_dim).to(x.dtype))

        def add(feat, proj):
            return feat + proj(emb)[:, :, None, None]

        e1 = add(self.enc1(x), self.t1)
        e2 = add(self.enc2(e1), self.t2)
        e3 = add(self.enc3(e2), self.t3)
        if self.use_gru:
            h = self.gru(h_prev, e3)
        else:
            h = self.mid(e3)
        d2 = F.interpolate(h, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        d2 = add(self.dec2(torch.cat([d2, e2], 1)), self.td2)
        d1 = F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d1 = add(self.dec1(torch.cat([d1, e1], 1)), self.td1)
        return DenoiseOutput(self.delta_head(d1), torch.sigmoid(self.conf_head(d1)),
                             h if self.use_gru else None)


def denoise_step(net: DenoiseUNet, cond, h_prev, t) -> DenoiseOutput:
    return net(cond, h_prev, t)
