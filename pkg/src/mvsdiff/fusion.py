"""Depth-map filtering and fusion into a point cloud, and cloud-to-cloud metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera

log = logging.getLogger(__name__)


@dataclass
class PointCloud:
    points: np.ndarray                 # (N, 3) world units
    colors: np.ndarray | None = None   # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class FusionConfig:
    conf_min: float = 0.3
    reproj_max: float = 1.0
    rel_depth_max: float = 0.01
    min_views: int = 2

    def __post_init__(self):
        if not (self.conf_min > 0 and self.reproj_max > 0 and self.rel_depth_max > 0):
            raise ValueError("fusion thresholds must be positive")
        if self.min_views < 1:
            raise ValueError("min_views must be >= 1")


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    H, W = img.shape
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u0 + 1]
            + (1 - a) * b * img[v0 + 1, u0] + a * b * img[v0 + 1, u0 + 1])


def _project(cam: Camera, X: np.ndarray):
    Xc = X @ cam.rotation.T + cam.translation
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (Xc @ cam.intrinsics.T)[..., :2] / z[..., None]
    return uv, z


def _backproject(cam: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    uv1 = np.concatenate([uv, np.ones_like(uv[..., :1])], axis=-1)
    rays = uv1 @ np.linalg.inv(cam.intrinsics).T
    Xc = rays * depth[..., None]
    return (Xc - cam.translation) @ cam.rotation


def reproject(ref_depth, ref_cam: Camera, src_depth, src_cam: Camera):
    """Round trip ref pixel -> src (at ref depth) -> back to ref (at bilinear src depth).

    Returns reprojected pixel coords (H, W, 2), reprojected depth (H, W) and
    the in-bounds mask. Out-of-bounds or behind-camera pixels get NaN.
    """
    H, W = ref_depth.shape
    Hs, Ws = src_depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    uv = np.stack([u, v], axis=-1)
    X = _backproject(ref_cam, uv, ref_depth)
    uv_s, z_s = _project(src_cam, X)
    inb = (z_s > 0) & np.isfinite(uv_s).all(-1)
    inb &= (uv_s[..., 0] >= 0) & (uv_s[..., 0] <= Ws - 1) & (uv_s[..., 1] >= 0) & (uv_s[..., 1] <= Hs - 1)
    uv_s = np.where(inb[..., None], uv_s, 0.0)
    d_s = _bilinear(src_depth, uv_s[..., 0], uv_s[..., 1])
    inb &= np.isfinite(d_s) & (d_s > 0)
    X_back = _backproject(src_cam, uv_s, np.where(inb, d_s, 1.0))
    uv_r, z_r = _project(ref_cam, X_back)
    uv_r = np.where(inb[..., None], uv_r, np.nan)
    z_r = np.where(inb, z_r, np.nan)
    return uv_r, z_r, inb


def geometric_check(ref_depth, ref_cam: Camera, src_depth, src_cam: Camera, cfg: FusionConfig):
    """Per-pixel forward-backward consistency of the reference depth against one source.

    Returns (consistent mask, reprojected depth). Not symmetric: each map is
    judged by where its own pixels land.
    """
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    uv_r, z_r, inb = reproject(ref_depth, ref_cam, np.asarray(src_depth, dtype=np.float64), src_cam)
    H, W = ref_depth.shape
    v, u = np.mgrid[0:H, 0:W]
    with np.errstate(invalid="ignore"):
        err = np.hypot(uv_r[..., 0] - u, uv_r[..., 1] - v)
        rel = np.abs(z_r - ref_depth) / ref_depth
        ok = inb & (err < cfg.reproj_max) & (rel < cfg.rel_depth_max)
    return ok, z_r


def fuse(depths, confidences, cams: list[Camera], cfg: FusionConfig | None = None,
         images=None) -> PointCloud:
    """Filter every view against all others and back-project the survivors.

    A pixel survives when its confidence is >= conf_min and it is consistent
    with at least ``min_views`` sources; its depth is averaged with the
    consistent reprojected depths before back-projection.
    """
    cfg = cfg or FusionConfig()
    if len(cams) < 2:
        raise ValueError("fusion needs at least two views")
    pts, cols = [], []
    for i, cam in enumerate(cams):
        d = np.asarray(depths[i], dtype=np.float64)
        valid = np.isfinite(d) & (d > 0)
        d_safe = np.where(valid, d, 1.0)
        count = np.zeros(d.shape, dtype=int)
        total = d_safe.copy()
        for j, src in enumerate(cams):
            if j == i:
                continue
            ok, z_r = geometric_check(d_safe, cam, depths[j], src, cfg)
            count += ok
            total += np.where(ok, z_r, 0.0)
        keep = valid & (np.asarray(confidences[i]) >= cfg.conf_min) & (count >= cfg.min_views)
        avg = total / (1 + count)
        v, u = np.nonzero(keep)
        pts.append(_backproject(cam, np.stack([u, v], -1).astype(np.float64), avg[keep]))
        if images is not None:
            cols.append(np.clip(np.asarray(images[i])[keep] * 255 + 0.5, 0, 255).astype(np.uint8))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(points) == 0:
        log.warning("fusion produced an empty point cloud")
    return PointCloud(points, np.concatenate(cols) if images is not None else None)


def nearest_distances(query: np.ndarray, ref: np.ndarray, method: str = "kdtree",
                      chunk: int = 2048) -> np.ndarray:
    """Distance from every query point to its nearest reference point."""
    query, ref = np.asarray(query, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if method == "kdtree":
        return cKDTree(ref).query(query, k=1)[0]
    if method == "brute":
        out = np.empty(len(query))
        for s in range(0, len(query), chunk):
            q = query[s:s + chunk]
            d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
            out[s:s + chunk] = np.sqrt(d2.min(axis=1))
        return out
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class CloudMetrics:
    accuracy: float
    completeness: float
    overall: float


def eval_cloud(pred: PointCloud, gt: PointCloud, dist_thresh: float = 0.2,
               method: str = "kdtree") -> CloudMetrics:
    """Mean clipped nearest-neighbor distances pred->gt (accuracy) and gt->pred (completeness)."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("cannot evaluate an empty point cloud")
    if not dist_thresh > 0:
        raise ValueError("dist_thresh must be positive")
    acc = float(np.minimum(nearest_distances(pred.points, gt.points, method), dist_thresh).mean())
    comp = float(np.minimum(nearest_distances(gt.points, pred.points, method), dist_thresh).mean())
    return CloudMetrics(acc, comp, 0.5 * (acc + comp))


def gt_cloud(depths, cams: list[Camera], stride: int = 1) -> PointCloud:
    """All ground-truth pixels of every view back-projected (optionally subsampled)."""
    pts = []
    for d, cam in zip(depths, cams):
        d = np.asarray(d, dtype=np.float64)[::stride, ::stride]
        v, u = np.mgrid[0:d.shape[0], 0:d.shape[1]] * stride
        ok = np.isfinite(d) & (d > 0)
        pts.append(_backproject(cam, np.stack([u[ok], v[ok]], -1).astype(np.float64), d[ok]))
    return PointCloud(np.concatenate(pts))

