"""End-to-end model: stage-1 depth initialization, diffusion refinement on the
finer stages and learned upsampling to full resolution.

Depths travel through the network as normalized inverse depth, shaped
(B, 1, H, W), and are converted to world units only for the final output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AblationConfig, ModelConfig, ModelVariant, RunConfig, make_variant
from .costvol import ViewWeightNet, build_cost_volume, upsample_weights
from .data import batch_cameras
from .diffusion import DiffusionState, RefineResult, ddim_infer, forward_diffuse, gt_residual, \
    make_schedule, reverse_refine
from .geometry import CameraTensors, denormalize_inverse, normalize_inverse
from .losses import LossConfig, conf_loss, depth_loss, total_loss
from .nets import (ConditionEncoder, ContextNet, CostRegNet, DenoiseUNet, FeatureNet, UpsampleMask,
                   convex_upsample, extract_features, regularize_init, stage_shape)
from .sampling import confidence_range, init_hypotheses, sample_local


# images arrive in [0, 1]; the networks see them roughly zero-centered
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


@dataclass
class DepthEstimate:
    """One entry of the ordered list of estimates supervised by the loss."""

    kind: str                       # "init" | "upsample" | "refine" | "final"
    stage: int                      # 1..M, or 0 for full resolution
    dbar: torch.Tensor              # (B, 1, H, W) normalized inverse depth
    confidence: torch.Tensor | None = None


@dataclass
class ModelOutput:
    depth: torch.Tensor             # (B, H, W) world units at full resolution
    confidence: torch.Tensor        # (B, H, W)
    dbar: torch.Tensor              # (B, H, W) normalized inverse depth
    estimates: list[DepthEstimate] = field(default_factory=list)
    view_weights: list[torch.Tensor] = field(default_factory=list)

    def stage_depths(self) -> dict:
        """Last estimate of every resolution (stage index, 0 for full)."""
        out = {}
        for e in self.estimates:
            out[e.stage] = e.dbar
        return out


def expected_inverse_depth(prob: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """Depth whose inverse is the probability-weighted mean of inverse hypothesis depths."""
    return 1.0 / (prob * (1.0 / depths)).sum(1)


class DepthDiffusionMVS(nn.Module):
    def __init__(self, variant: ModelVariant | str = "DiffMVS", model: ModelConfig | None = None,
                 ablation: AblationConfig | None = None, T: int = 1000,
                 beta_start: float = 1e-4, beta_end: float = 0.02, ddim_steps: int = 1):
        super().__init__()
        self.variant = make_variant(variant) if isinstance(variant, str) else variant
        self.cfg = model or ModelConfig()
        self.ablation = ablation or AblationConfig()
        self.ddim_steps = ddim_steps
        M, cfg = self.variant.num_stages, self.cfg
        self.feature_net = FeatureNet(M, cfg.feature_channels)
        self.context_net = ContextNet(M, cfg.context_dim, cfg.hidden_dim)
        self.weight_net = ViewWeightNet(cfg.groups)
        self.cost_reg = CostRegNet(cfg.groups, cfg.costreg_base)
        ratios = {m: 2 for m in range(1, M)}
        ratios[M] = self.variant.final_ratio
        self.upsamplers = nn.ModuleDict({str(m): UpsampleMask(cfg.context_dim, r) for m, r in ratios.items()})
        self.schedules = {m: make_schedule(T, self.variant.sigma[m], beta_start, beta_end)
                          for m in self.variant.refine_stages}
        self.encoders = nn.ModuleDict()
        self.denoisers = nn.ModuleDict()
        for m in self.variant.refine_stages:
            n_nets = self.variant.iterations[m] if self.ablation.denoiser == "stacked" else 1
            d1 = self.num_samples(m)
            enc = [ConditionEncoder(d1, cfg.groups, cfg.context_dim,
                                    use_cost=self.ablation.use_cost_volume,
                                    use_depth_context=self.ablation.use_depth_context,
                                    use_image_context=self.ablation.use_image_context)
                   for _ in range(n_nets)]
            self.encoders[str(m)] = nn.ModuleList(enc)
            self.denoisers[str(m)] = nn.ModuleList([
                DenoiseUNet(enc[0].out_dim + 1, cfg.unet_width, cfg.hidden_dim,
                            use_gru=self.ablation.denoiser == "gru")
                for _ in range(n_nets)])

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DepthDiffusionMVS":
        s = cfg.schedule
        return cls(cfg.model_variant(), cfg.model, cfg.ablation, s.T, s.beta_start, s.beta_end, s.ddim_steps)

    def num_samples(self, stage: int) -> int:
        return 1 if self.ablation.sampling == "single" else self.variant.sampling[stage].num_samples

    def iterations(self, stage: int) -> int:
        return 1 if self.ablation.denoiser == "single" else self.variant.iterations[stage]

    @property
    def uses_confidence_loss(self) -> bool:
        return self.ablation.sampling in ("confidence", "conf_regularization")

    # -- stage 1 -------------------------------------------------------------

    def initialize_depth(self, feats, cams: list[CameraTensors]):
        """Stage-1 plane sweep over uniform inverse hypotheses.

        Returns normalized inverse depth (B,1,H1,W1), world depth (B,H1,W1),
        the probability volume and the stage-1 view weights.
        """
        ref_feat = feats[0][1]
        B, _, H, W = ref_feat.shape
        scale = 2 ** 3
        cams1 = [c.scaled(scale) for c in cams]
        d_min, d_max = cams[0].d_min, cams[0].d_max
        hyps = init_hypotheses((1.0, 2.0), self.cfg.num_init_hypotheses, (H, W), B, ref_feat.dtype)
        vol, weights, _ = build_cost_volume(ref_feat, [f[1] for f in feats[1:]], cams1[0], cams1[1:],
                                            hyps, self.cfg.groups, weight_net=self.weight_net)
        prob = regularize_init(vol, self.cost_reg)
        depths = denormalize_inverse(hyps, d_min.view(B, 1, 1, 1), d_max.view(B, 1, 1, 1))
        depth = expected_inverse_depth(prob, depths)
        dbar = (prob * hyps).sum(1, keepdim=True)
        return dbar, depth, prob, weights

    # -- refinement ----------------------------------------------------------

    def _step_fn(self, stage, feats, context, hidden0, cams_m, weights_m):
        cfg = self.variant.sampling[stage]
        encoders, denoisers = self.encoders[str(stage)], self.denoisers[str(stage)]
        ref_feat = feats[0][stage]
        src_feats = [f[stage] for f in feats[1:]]
        mode = self.ablation.sampling

        def step(state: DiffusionState, dbar_prev):
            center = dbar_prev.detach()
            if mode == "single":
                hyps = sample_local(center, 0.0, 1)
            else:
                conf = None if state.confidence is None else state.confidence.detach()
                adaptive = mode == "confidence" and conf is not None and state.k > 1
                radius = confidence_range(conf, cfg, first_iteration=not adaptive) if adaptive else cfg.r_init
                hyps = sample_local(center, radius, cfg.num_samples)
            vol, _, _ = build_cost_volume(ref_feat, src_feats, cams_m[0], cams_m[1:], hyps,
                                          self.cfg.groups, weights=weights_m)
            idx = state.k - 1 if len(encoders) > 1 else 0
            cond = encoders[idx](vol.flatten(1, 2), hyps, center, context)
            x_in = torch.cat([cond, state.residual.detach()], dim=1)
            h = hidden0 if state.hidden is None else state.hidden
            out = denoisers[idx](x_in, h, state.t)
            return out.delta, out.confidence, out.hidden

        return step

    def refine_stage(self, stage: int, dbar0: torch.Tensor, feats, ctx, cams, weights,
                     mode: str = "infer", dbar_gt: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> tuple[torch.Tensor, RefineResult]:
        """Refine an upsampled (B,1,Hm,Wm) normalized inverse depth at ``stage``.

        Train mode diffuses the ground-truth residual to a random timestep per
        sample; infer mode runs DDIM from scaled noise. Returns the refined
        depth (clamped to [0, 1]) and the per-iteration record.
        """
        if mode == "train" and dbar_gt is None:
            raise ValueError("train mode needs ground-truth depth")
        sched = self.schedules[stage]
        B = dbar0.shape[0]
        dbar0 = dbar0.detach()
        f = 2 ** (4 - stage)
        cams_m = [c.scaled(f) for c in cams]
        weights_m = [w.detach() for w in upsample_weights(weights, dbar0.shape[-2:])]
        step = self._step_fn(stage, feats, ctx.context[stage], ctx.hidden[stage], cams_m, weights_m)
        K = self.iterations(stage)
        diffusion = self.ablation.diffusion

        def noise():
            eps = torch.randn(dbar0.shape, generator=generator, dtype=dbar0.dtype)
            return eps.to(dbar0.device)

        zeros_t = torch.zeros(B, dtype=torch.long, device=dbar0.device)
        if mode == "train":
            if diffusion == "diffusion":
                t = torch.randint(1, sched.T + 1, (B,), generator=generator).to(dbar0.device)
                x_t = forward_diffuse(gt_residual(dbar_gt, dbar0), t, noise(), sched)
            elif diffusion == "none":
                t, x_t = zeros_t, torch.zeros_like(dbar0)
            else:
                t, x_t = zeros_t, sched.sigma * noise()
            result = reverse_refine(DiffusionState(x_t, t), dbar0, step, K)
            return result.depths[-1].clamp(0, 1), result

        if diffusion == "diffusion":
            record = {}

            def refine(x, t):
                record["r"] = reverse_refine(DiffusionState(x, t), dbar0, step, K)
                return record["r"].x0_hat

            out, _ = ddim_infer(dbar0, refine, sched, self.ddim_steps, generator)
            return out, record["r"]
        x_t = sched.sigma * noise() if diffusion == "noise_train_test" else torch.zeros_like(dbar0)
        result = reverse_refine(DiffusionState(x_t, zeros_t), dbar0, step, K)
        return (dbar0 + result.x0_hat).clamp(0, 1), result

    # -- full pass -----------------------------------------------------------

    def forward(self, batch: dict, mode: str = "infer", generator: torch.Generator | None = None) -> ModelOutput:
        images = batch["images"]
        B, N, _, H, W = images.shape
        if N < 2:
            raise ValueError("need a reference view and at least one source view")
        cams = batch_cameras(batch)
        images = (images - IMAGE_MEAN) / IMAGE_STD
        feats = extract_features(self.feature_net, images)
        ctx = self.context_net(images[:, 0])
        d_min, d_max = cams[0].d_min.view(B, 1, 1, 1), cams[0].d_max.view(B, 1, 1, 1)
        gt_dbar = None
        if mode == "train":
            if "depth" not in batch:
                raise ValueError("train mode needs ground-truth depth")
            gt = batch["depth"].unsqueeze(1)
            gt_dbar = normalize_inverse(gt.clamp_min(1e-6), d_min, d_max)

        estimates = []
        dbar, _, _, weights = self.initialize_depth(feats, cams)
        estimates.append(DepthEstimate("init", 1, dbar))
        conf = None
        for m in range(2, self.variant.num_stages + 1):
            dbar = convex_upsample(dbar.detach(), self.upsamplers[str(m - 1)](ctx.context[m - 1]), 2)
            estimates.append(DepthEstimate("upsample", m, dbar))
            f = 2 ** (4 - m)
            stage_gt = None if gt_dbar is None else gt_dbar[..., ::f, ::f]
            dbar, result = self.refine_stage(m, dbar, feats, ctx, cams, weights, mode, stage_gt, generator)
            for d, c in zip(result.depths, result.confidences):
                estimates.append(DepthEstimate("refine", m, d, c))
            conf = result.confidence
        mask = self.upsamplers[str(self.variant.num_stages)](ctx.context[self.variant.num_stages])
        r = self.variant.final_ratio
        dbar_full = convex_upsample(dbar.detach() if mode == "train" else dbar, mask, r)
        estimates.append(DepthEstimate("final", 0, dbar_full))
        conf_full = convex_upsample(conf.detach(), mask.detach(), r)
        dbar_out = dbar_full.clamp(0, 1)
        depth = denormalize_inverse(dbar_out, d_min, d_max)
        return ModelOutput(depth[:, 0], conf_full[:, 0], dbar_out[:, 0], estimates, weights)

    def loss(self, out: ModelOutput, batch: dict, cfg: LossConfig | None = None):
        """Sequence loss over every estimate; returns (total, per-estimate list)."""
        cfg = cfg or LossConfig()
        cams = batch_cameras(batch)
        B = batch["depth"].shape[0]
        d_min, d_max = cams[0].d_min.view(B, 1, 1, 1), cams[0].d_max.view(B, 1, 1, 1)
        gt = batch["depth"].unsqueeze(1)
        mask = batch.get("mask", torch.ones_like(batch["depth"], dtype=torch.bool)).unsqueeze(1)
        gt_dbar = normalize_inverse(gt.clamp_min(1e-6), d_min, d_max)
        terms = []
        for e in out.estimates:
            f = 1 if e.stage == 0 else 2 ** (4 - e.stage)
            g, v = gt_dbar[..., ::f, ::f], mask[..., ::f, ::f]
            if e.kind == "refine" and self.uses_confidence_loss:
                terms.append(conf_loss(e.dbar, g, e.confidence, cfg.lambda_c, v))
            else:
                terms.append(depth_loss(e.dbar, g, v))
        return total_loss(terms, cfg.beta), terms


def num_estimates(variant: ModelVariant) -> int:
    """Length of the supervised estimate list: init, per-stage (upsample + K), final."""
    return 1 + sum(variant.iterations[m] + 1 for m in variant.refine_stages) + 1


def bilinear_init_upsample(dbar_init: torch.Tensor, size) -> torch.Tensor:
    """Baseline: bilinear upsampling of the stage-1 estimate to ``size``."""
    return F.interpolate(dbar_init, size=size, mode="bilinear", align_corners=False)
