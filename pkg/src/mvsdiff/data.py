"""Scene directories, manifests and the torch dataset of reference/source samples.

A scene directory holds ``images/NN.png``, ``cams/NN.txt`` and
``depths/NN.pfm``; a manifest is a JSON object ``{"scenes": [dirs...]}``
with directories relative to the manifest's folder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset

from .geometry import Camera, CameraTensors
from .io import read_cam, read_image, read_pfm, write_cam, write_image, write_pfm


@dataclass
class SceneData:
    """Views of one scene in memory. depths may be None when ground truth is unavailable."""

    images: np.ndarray
    cameras: list[Camera]
    depths: np.ndarray | None = None
    name: str = ""

    @property
    def num_views(self) -> int:
        return len(self.cameras)


def scene_data(scene, name: str = "") -> SceneData:
    """Anything with ``images``, ``cameras`` and ``depths`` (e.g. a SyntheticScene) -> SceneData."""
    return SceneData(np.asarray(scene.images, dtype=np.float32), list(scene.cameras),
                     None if scene.depths is None else np.asarray(scene.depths), name)


def save_scene(scene, root) -> Path:
    root = Path(root)
    for sub in ("images", "cams", "depths"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(scene.cameras):
        write_image(root / "images" / f"{i:02d}.png", scene.images[i])
        write_cam(root / "cams" / f"{i:02d}.txt", cam)
        if scene.depths is not None:
            write_pfm(root / "depths" / f"{i:02d}.pfm", scene.depths[i])
    return root


def load_scene(root) -> SceneData:
    root = Path(root)
    cam_files = sorted((root / "cams").glob("*.txt"))
    if not cam_files:
        raise FileNotFoundError(f"no cameras in {root / 'cams'}")
    cams = [read_cam(p) for p in cam_files]
    images = np.stack([read_image(root / "images" / f"{p.stem}.png") for p in cam_files])
    depth_files = [root / "depths" / f"{p.stem}.pfm" for p in cam_files]
    depths = np.stack([read_pfm(p) for p in depth_files]) if all(p.exists() for p in depth_files) else None
    return SceneData(images, cams, depths, root.name)


def write_manifest(path, scene_dirs) -> None:
    path = Path(path)
    rel = [str(Path(d).resolve().relative_to(path.parent.resolve())) for d in scene_dirs]
    path.write_text(json.dumps({"scenes": rel}, indent=2))


def read_manifest(path) -> list[Path]:
    path = Path(path)
    data = json.loads(path.read_text())
    if not isinstance(data, dict) or not isinstance(data.get("scenes"), list):
        raise ValueError(f"{path}: manifest must be an object with a 'scenes' list")
    return [path.parent / s for s in data["scenes"]]


def load_manifest(path) -> list[SceneData]:
    return [load_scene(d) for d in read_manifest(path)]


def make_sample(scene: SceneData, ref: int = 0, num_views: int | None = None) -> dict:
    """Reference view ``ref`` plus the following views (cyclically) as sources."""
    n = scene.num_views if num_views is None else num_views
    order = [(ref + i) % scene.num_views for i in range(n)]
    cams = [scene.cameras[i] for i in order]
    sample = {
        "images": torch.from_numpy(np.ascontiguousarray(scene.images[order].transpose(0, 3, 1, 2))).float(),
        "K": torch.tensor(np.stack([c.intrinsics for c in cams]), dtype=torch.float32),
        "R": torch.tensor(np.stack([c.rotation for c in cams]), dtype=torch.float32),
        "t": torch.tensor(np.stack([c.translation for c in cams]), dtype=torch.float32),
        "depth_range": torch.tensor([c.depth_range for c in cams], dtype=torch.float32),
    }
    if scene.depths is not None:
        depth = torch.from_numpy(np.asarray(scene.depths[ref], dtype=np.float32))
        d_min, d_max = cams[0].depth_range
        sample["depth"] = depth
        sample["mask"] = (depth >= d_min) & (depth <= d_max) & torch.isfinite(depth)
    return sample


class MVSDataset(Dataset):
    """Every view of every scene as a reference view."""

    def __init__(self, scenes, all_references: bool = True):
        self.scenes = [s if isinstance(s, SceneData) else scene_data(s) for s in scenes]
        if not self.scenes:
            raise ValueError("dataset is empty")
        self.index = [(i, r) for i, s in enumerate(self.scenes)
                      for r in (range(s.num_views) if all_references else [0])]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, idx):
        i, r = self.index[idx]
        return make_sample(self.scenes[i], r)


def batch_cameras(batch: dict) -> list[CameraTensors]:
    """Per-view batched cameras from a collated sample dict."""
    N = batch["K"].shape[1]
    rng = batch["depth_range"]
    return [CameraTensors(batch["K"][:, i], batch["R"][:, i], batch["t"][:, i], rng[:, i, 0], rng[:, i, 1])
            for i in range(N)]


def collate(samples: list[dict]) -> dict:
    return {k: torch.stack([s[k] for s in samples]) for k in samples[0]}
