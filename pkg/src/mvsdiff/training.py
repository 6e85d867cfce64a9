"""Training loop, held-out evaluation and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr
from torch.utils.data import DataLoader

from .config import RunConfig
from .data import MVSDataset, collate
from .diffusion import noise_scaling_finetune
from .geometry import normalize_inverse
from .losses import LossConfig
from .pipeline import DepthDiffusionMVS, bilinear_init_upsample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    return torch.Generator().manual_seed(seed)


def set_finetune_epoch(model: DepthDiffusionMVS, base_schedules: dict, epoch: int | None) -> None:
    for m, sched in base_schedules.items():
        model.schedules[m] = noise_scaling_finetune(sched, epoch, active=epoch is not None)


def train_model(model: DepthDiffusionMVS, train_data, cfg: RunConfig, val_data=None,
                dump_dir=None) -> TrainHistory:
    """Minimize the sequence loss with Adam and a one-cycle learning rate.

    ``train_data`` is an MVSDataset or a list of scenes. Validation metrics
    are computed after every epoch when ``val_data`` is given. A non-finite
    loss aborts training; the offending batch is saved to ``dump_dir``.
    """
    tc = cfg.train
    ds = train_data if isinstance(train_data, MVSDataset) else MVSDataset(train_data)
    gen = seed_everything(cfg.seed)
    loader = DataLoader(ds, batch_size=tc.batch_size, shuffle=True, collate_fn=collate,
                        generator=gen, drop_last=len(ds) >= tc.batch_size)
    steps_per_epoch = len(loader)
    total = tc.epochs * steps_per_epoch
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    if total < 1:
        raise TrainingError("no training steps")
    opt = torch.optim.Adam(model.parameters(), lr=tc.max_lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=tc.max_lr, total_steps=total)
    loss_cfg = LossConfig(cfg.loss.lambda_c, cfg.loss.beta)
    base_schedules = dict(model.schedules)
    hist, step = TrainHistory(), 0
    try:
        for epoch in range(tc.epochs):
            set_finetune_epoch(model, base_schedules, epoch if tc.finetune else None)
            model.train()
            for batch in loader:
                out = model(batch, "train", generator=gen)
                loss, _ = model.loss(out, batch, loss_cfg)
                if not torch.isfinite(loss):
                    _dump(batch, dump_dir, step)
                    raise TrainingError(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                hist.losses.append(float(loss.detach()))
                hist.lrs.append(sched.get_last_lr()[0])
                step += 1
                if tc.log_every and step % tc.log_every == 0:
                    log.info("step %d loss %.5f", step, hist.losses[-1])
                if step >= total:
                    break
            if val_data is not None:
                metrics = evaluate(model, val_data, seed=cfg.seed)
                metrics["epoch"] = epoch
                hist.val.append(metrics)
                log.info("epoch %d val refined %.5f init %.5f", epoch, metrics["refined_error"],
                         metrics["init_error"])
            if step >= total:
                break
    finally:
        set_finetune_epoch(model, base_schedules, None)
    return hist


def _dump(batch, dump_dir, step):
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nan_batch_step{step}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(batch, path)
    log.error("non-finite loss; batch saved to %s", path)


@torch.no_grad()
def evaluate(model: DepthDiffusionMVS, data, seed: int = 0) -> dict:
    """Per-scene errors of the refined output vs bilinear-upsampled initialization.

    Errors are mean absolute normalized inverse depth over valid pixels, using
    every view as a reference. ``corr`` is the per-scene Spearman correlation
    between (1 - confidence) and absolute error.
    """
    ds = data if isinstance(data, MVSDataset) else MVSDataset(data)
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    per_scene: dict[int, dict] = {}
    for idx, (si, _) in enumerate(ds.index):
        batch = collate([ds[idx]])
        out = model(batch, "infer", generator=gen)
        d_min, d_max = batch["depth_range"][:, 0, 0], batch["depth_range"][:, 0, 1]
        gt = normalize_inverse(batch["depth"], d_min.view(-1, 1, 1), d_max.view(-1, 1, 1))
        mask = batch["mask"]
        init = bilinear_init_upsample(out.estimates[0].dbar, gt.shape[-2:])[:, 0]
        err = (out.dbar - gt).abs()[mask]
        rec = per_scene.setdefault(si, {"refined": [], "init": [], "err": [], "unc": []})
        rec["refined"].append(float(err.mean()))
        rec["init"].append(float((init - gt).abs()[mask].mean()))
        rec["err"].append(err.numpy())
        rec["unc"].append((1 - out.confidence)[mask].numpy())
    refined = np.array([np.mean(r["refined"]) for r in per_scene.values()])
    init = np.array([np.mean(r["init"]) for r in per_scene.values()])
    corr = np.array([_spearman(np.concatenate(r["unc"]), np.concatenate(r["err"])) for r in per_scene.values()])
    return {
        "refined_error": float(refined.mean()),
        "init_error": float(init.mean()),
        "improved_fraction": float(np.mean(refined < init)),
        "spearman_mean": float(np.nanmean(corr)) if np.isfinite(corr).any() else math.nan,
        "per_scene_refined": refined.tolist(),
        "per_scene_init": init.tolist(),
        "per_scene_spearman": corr.tolist(),
    }


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    return float(spearmanr(a, b).statistic)


def save_checkpoint(model: DepthDiffusionMVS, cfg: RunConfig, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "config": cfg.to_dict(),
                "config_hash": cfg.hash(), **(extra or {})}, path)


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[DepthDiffusionMVS, RunConfig]:
    """Rebuild the model from a checkpoint; the stored config is used unless ``cfg`` is given."""
    from .config import config_from_dict
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = cfg or config_from_dict(blob["config"])
    model = DepthDiffusionMVS.from_config(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, cfg
