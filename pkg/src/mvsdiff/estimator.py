"""scikit-learn style wrapper around the depth model.

``X`` is a list of scenes (SceneData or SyntheticScene). Ground truth is
taken from the scenes themselves, so ``y`` is ignored.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import config_from_dict
from .data import MVSDataset, SceneData, collate, make_sample, scene_data
from .pipeline import DepthDiffusionMVS
from .training import evaluate, train_model


def check_scenes(X, require_depth: bool = False) -> list[SceneData]:
    """Validate a list of scenes and convert them to SceneData."""
    if isinstance(X, (SceneData,)) or hasattr(X, "cameras"):
        X = [X]
    scenes = [s if isinstance(s, SceneData) else scene_data(s) for s in X]
    if not scenes:
        raise ValueError("expected at least one scene")
    for s in scenes:
        if s.num_views < 2:
            raise ValueError("every scene needs at least two views")
        if s.images.ndim != 4 or s.images.shape[-1] != 3 or len(s.images) != s.num_views:
            raise ValueError("images must be (N, H, W, 3) with one image per camera")
        H, W = s.images.shape[1:3]
        if H % 16 or W % 16:
            raise ValueError(f"image size {H}x{W} must be a multiple of 16")
        if require_depth and s.depths is None:
            raise ValueError("ground-truth depth required")
    return scenes


class DepthDiffusionEstimator(BaseEstimator):
    def __init__(self, variant="DiffMVS", epochs=10, batch_size=4, max_lr=1e-3, max_steps=None,
                 diffusion="diffusion", sampling="confidence", denoiser="gru", ddim_steps=1, seed=0,
                 model_config=None):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.max_steps = max_steps
        self.diffusion = diffusion
        self.sampling = sampling
        self.denoiser = denoiser
        self.ddim_steps = ddim_steps
        self.seed = seed
        self.model_config = model_config    # dict of network-size overrides, e.g. {"unet_width": 16}

    def _config(self):
        return config_from_dict({
            "seed": self.seed, "variant": self.variant, "model": dict(self.model_config or {}),
            "schedule": {"ddim_steps": self.ddim_steps},
            "ablation": {"diffusion": self.diffusion, "sampling": self.sampling, "denoiser": self.denoiser},
            "train": {"epochs": self.epochs, "batch_size": self.batch_size, "max_lr": self.max_lr,
                      "max_steps": self.max_steps, "log_every": 0},
        })

    def fit(self, X, y=None, X_val=None):
        scenes = check_scenes(X, require_depth=True)
        self.config_ = self._config()
        torch.manual_seed(self.seed)
        self.model_ = DepthDiffusionMVS.from_config(self.config_)
        self.history_ = train_model(self.model_, MVSDataset(scenes), self.config_,
                                    None if X_val is None else check_scenes(X_val, True))
        return self

    def predict(self, X, return_confidence: bool = False):
        """Per-scene (N, H, W) depth maps (and confidences) with every view as reference."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        gen = torch.Generator().manual_seed(self.seed)
        depths, confs = [], []
        with torch.no_grad():
            for s in check_scenes(X):
                outs = [self.model_(collate([make_sample(s, r)]), "infer", generator=gen) for r in range(s.num_views)]
                depths.append(np.stack([o.depth[0].numpy() for o in outs]))
                confs.append(np.stack([o.confidence[0].numpy() for o in outs]))
        return (depths, confs) if return_confidence else depths

    def score(self, X, y=None) -> float:
        """Negative mean absolute normalized inverse-depth error (higher is better)."""
        check_is_fitted(self, "model_")
        return -evaluate(self.model_, check_scenes(X, require_depth=True), self.seed)["refined_error"]
