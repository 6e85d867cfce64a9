"""Group-wise similarity volumes, pixel-wise view weights and weighted aggregation.

Shapes: reference features (B, C, H, W); warped source features
(B, C, D, H, W); similarity and cost volumes (B, G, D, H, W); view weights
(B, H, W) per source view.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraTensors, denormalize_inverse, warp_features


def groupwise_similarity(ref_feat: torch.Tensor, warped: torch.Tensor, groups: int,
                         valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over each channel group of the reference/warped feature product."""
    B, C = ref_feat.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels cannot be split into {groups} groups")
    D, H, W = warped.shape[2:]
    ref = ref_feat.view(B, groups, C // groups, 1, H, W)
    sim = (warped.view(B, groups, C // groups, D, H, W) * ref).mean(2)
    if valid is not None:
        sim = sim * valid.unsqueeze(1).to(sim.dtype)
    return sim


class ViewWeightNet(nn.Module):
    """Two 1x1x1 3D convs (G -> 8 -> 1) producing per-hypothesis visibility logits."""

    def __init__(self, groups: int = 4, hidden: int = 8):
        super().__init__()
        self.conv1 = nn.Conv3d(groups, hidden, 1)
        self.conv2 = nn.Conv3d(hidden, 1, 1)

    def forward(self, sim):
        return self.conv2(F.relu(self.conv1(sim))).squeeze(1)


def weights_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """(B, D, H, W) logits -> (B, H, W) max of the depth-wise softmax."""
    return torch.softmax(logits, dim=1).amax(dim=1)


def view_weights(sim: torch.Tensor, weight_net: nn.Module) -> torch.Tensor:
    return weights_from_logits(weight_net(sim))


def aggregate(sims: list[torch.Tensor], weights: list[torch.Tensor]):
    """Visibility-weighted mean of per-view similarity volumes.

    Returns the cost volume and a (B, H, W) mask of pixels whose weights sum
    to zero; those pixels get a zero cost.
    """
    if not sims or len(sims) != len(weights):
        raise ValueError("need one weight map per similarity volume (at least one view)")
    num = sum(w[:, None, None] * s for s, w in zip(sims, weights))
    den = sum(weights)
    empty = den <= 0
    safe = torch.where(empty, torch.ones_like(den), den)
    vol = num / safe[:, None, None]
    vol = vol * (~empty)[:, None, None].to(vol.dtype)
    return vol, empty


def upsample_weights(weights: list[torch.Tensor], size: tuple[int, int]) -> list[torch.Tensor]:
    """Nearest-neighbor upsampling of stage-1 view weights to a finer stage."""
    return [F.interpolate(w.unsqueeze(1), size=size, mode="nearest").squeeze(1) for w in weights]


def build_cost_volume(ref_feat: torch.Tensor, src_feats: list[torch.Tensor],
                      ref_cam: CameraTensors, src_cams: list[CameraTensors],
                      hyps: torch.Tensor, groups: int = 4,
                      weight_net: nn.Module | None = None,
                      weights: list[torch.Tensor] | None = None):
    """Plane-sweep cost volume over per-pixel normalized inverse-depth hypotheses.

    Cameras must already be scaled to the feature resolution. Either
    ``weight_net`` (stage 1: weights are estimated) or ``weights`` (later
    stages: reused) must be given; when neither is, views are weighted equally.

    Returns (volume (B, G, D, H, W), weights list, empty-pixel mask).
    """
    d_min = ref_cam.d_min.view(-1, 1, 1, 1)
    d_max = ref_cam.d_max.view(-1, 1, 1, 1)
    depth = denormalize_inverse(hyps, d_min, d_max)
    sims, est = [], []
    for i, (feat, cam) in enumerate(zip(src_feats, src_cams)):
        warped, valid = warp_features(feat, ref_cam, cam, depth)
        sim = groupwise_similarity(ref_feat, warped, groups, valid)
        sims.append(sim)
        if weights is None:
            if weight_net is not None:
                est.append(view_weights(sim, weight_net))
            else:
                est.append(torch.ones_like(sim[:, 0, 0]))
    used = est if weights is None else weights
    vol, empty = aggregate(sims, used)
    return vol, used, empty
