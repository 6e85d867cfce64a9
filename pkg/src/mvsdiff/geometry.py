"""Pinhole camera math: warping between views, back-projection, bilinear
sampling and the normalized inverse-depth parameterization.

Conventions: pixel centers sit at integer coordinates, the homogeneous pixel
is ``(u, v, 1)`` with ``u`` along the width axis, and extrinsics map world to
camera coordinates (``X_cam = R @ X_world + t``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

_EPS_Z = 1e-12
# coordinates this close outside the image (roundoff) count as on the border
_EDGE_TOL = 1e-3


@dataclass(frozen=True)
class Camera:
    """Pinhole camera of one view plus the scene depth range seen from it."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    depth_range: tuple[float, float]

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper triangular")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant 1")
        d_min, d_max = (float(v) for v in self.depth_range)
        if not 0 < d_min < d_max:
            raise ValueError(f"invalid depth range ({d_min}, {d_max})")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "depth_range", (d_min, d_max))

    @classmethod
    def from_extrinsic(cls, extrinsic, intrinsics, depth_range) -> "Camera":
        E = np.asarray(extrinsic, dtype=np.float64)
        return cls(intrinsics, E[:3, :3], E[:3, 3], depth_range)

    @property
    def extrinsic(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.rotation
        E[:3, 3] = self.translation
        return E

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Camera for a feature map downsampled by ``factor`` with strided convs.

        A stride-``f`` conv output pixel ``i`` is centered on input pixel
        ``f * i``, so both focal lengths and the principal point divide by f.
        """
        K = self.intrinsics.copy()
        K[:2] /= factor
        return Camera(K, self.rotation, self.translation, self.depth_range)


@dataclass
class DepthMap:
    """Per-pixel depth (world units) with validity mask at resolution stage ``stage``."""

    values: np.ndarray
    valid: np.ndarray = None
    stage: int = 0
    depth_range: tuple[float, float] | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)

    def normalized(self, depth_range=None) -> np.ndarray:
        d_min, d_max = depth_range or self.depth_range
        out = np.zeros_like(self.values, dtype=np.float64)
        out[self.valid] = normalize_inverse(self.values[self.valid], d_min, d_max)
        return out


def relative_pose(ref_cam: Camera, src_cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking reference-camera to source-camera coordinates."""
    R = src_cam.rotation @ ref_cam.rotation.T
    t = src_cam.translation - R @ ref_cam.translation
    return R, t


def project(cam: Camera, point) -> tuple[np.ndarray, float]:
    """World point -> (pixel, depth in this camera)."""
    X = cam.rotation @ np.asarray(point, dtype=np.float64) + cam.translation
    uvw = cam.intrinsics @ X
    return uvw[:2] / uvw[2], float(X[2])


def backproject(cam: Camera, pixel, depth: float) -> np.ndarray:
    """Pixel at the given camera depth -> world point."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    ray = np.linalg.solve(cam.intrinsics, np.array([u, v, 1.0]))
    X_cam = ray * depth
    return cam.rotation.T @ (X_cam - cam.translation)


def warp_pixel(ref_cam: Camera, src_cam: Camera, pixel, depth: float,
               image_size: tuple[int, int] | None = None) -> tuple[np.ndarray, bool]:
    """Map a reference pixel at ``depth`` into the source view.

    Returns the dehomogenized source pixel and an in-bounds flag. The flag is
    False for points at or behind the source camera and, when ``image_size``
    ``(H, W)`` is given, for points outside ``[0, W-1] x [0, H-1]``.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    R, t = relative_pose(ref_cam, src_cam)
    u, v = pixel
    X = np.linalg.solve(ref_cam.intrinsics, np.array([u, v, 1.0])) * depth
    uvw = src_cam.intrinsics @ (R @ X + t)
    if abs(uvw[2]) < _EPS_Z:
        return np.array([np.nan, np.nan]), False
    p = uvw[:2] / uvw[2]
    ok = bool(uvw[2] > 0)
    if image_size is not None:
        H, W = image_size
        ok = ok and 0 <= p[0] <= W - 1 and 0 <= p[1] <= H - 1
    return p, ok


def normalize_inverse(depth, d_min, d_max):
    """Depth -> normalized inverse depth in [0, 1] (1 at d_min, 0 at d_max)."""
    if (depth <= 0).any() if hasattr(depth, "any") else depth <= 0:
        raise ValueError("depth must be positive")
    return (1.0 / depth - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max)


def denormalize_inverse(dbar, d_min, d_max):
    inv = dbar * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max
    return 1.0 / inv


class CameraTensors(NamedTuple):
    """Batched camera parameters: K (B,3,3), R (B,3,3), t (B,3), depth range (B,)."""

    K: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    d_min: torch.Tensor
    d_max: torch.Tensor

    def to(self, *args, **kwargs) -> "CameraTensors":
        return CameraTensors(*(x.to(*args, **kwargs) for x in self))

    def scaled(self, factor: float) -> "CameraTensors":
        K = self.K.clone()
        K[:, :2] = K[:, :2] / factor
        return self._replace(K=K)

    def index(self, i) -> "CameraTensors":
        return CameraTensors(*(x[i] for x in self))


def stack_cameras(cams: list[Camera], dtype=torch.float32) -> CameraTensors:
    return CameraTensors(
        torch.tensor(np.stack([c.intrinsics for c in cams]), dtype=dtype),
        torch.tensor(np.stack([c.rotation for c in cams]), dtype=dtype),
        torch.tensor(np.stack([c.translation for c in cams]), dtype=dtype),
        torch.tensor([c.depth_range[0] for c in cams], dtype=dtype),
        torch.tensor([c.depth_range[1] for c in cams], dtype=dtype),
    )


def pixel_grid(H: int, W: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Homogeneous pixel coordinates (3, H*W), row-major."""
    v, u = torch.meshgrid(torch.arange(H, dtype=dtype, device=device),
                          torch.arange(W, dtype=dtype, device=device), indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1), torch.ones_like(u).reshape(-1)])


def warp_coords(ref: CameraTensors, src: CameraTensors, depth: torch.Tensor,
                src_size: tuple[int, int] | None = None):
    """Source pixel coordinates of every reference pixel at every hypothesis depth.

    depth: (B, D, H, W) world depths. Returns coords (B, D, H, W, 2) and a
    validity mask (B, D, H, W) that is False for non-positive source depth and
    for coordinates outside the source image (``src_size`` defaults to H, W).
    """
    B, D, H, W = depth.shape
    Hs, Ws = src_size or (H, W)
    R = src.R @ ref.R.transpose(1, 2)
    t = src.t - (R @ ref.t.unsqueeze(-1)).squeeze(-1)
    rays = torch.linalg.solve(ref.K, pixel_grid(H, W, depth.dtype, depth.device).expand(B, 3, H * W))
    rot = src.K @ R @ rays                                   # (B,3,HW)
    trans = (src.K @ t.unsqueeze(-1))                        # (B,3,1)
    xyz = rot.unsqueeze(1) * depth.reshape(B, D, 1, H * W) + trans.unsqueeze(1)
    z = xyz[:, :, 2]
    safe_z = torch.where(z.abs() < _EPS_Z, torch.full_like(z, _EPS_Z), z)
    uv = xyz[:, :, :2] / safe_z.unsqueeze(2)
    u, v = uv[:, :, 0], uv[:, :, 1]
    valid = (z > _EPS_Z) & (u >= -_EDGE_TOL) & (u <= Ws - 1 + _EDGE_TOL) \
        & (v >= -_EDGE_TOL) & (v <= Hs - 1 + _EDGE_TOL)
    coords = uv.permute(0, 1, 3, 2).reshape(B, D, H, W, 2)
    return coords, valid.reshape(B, D, H, W)


def sample_feature_map(feat: torch.Tensor, coords: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear lookup of (B,C,H,W) features at pixel coords (B,...,2).

    Coordinates outside ``[0, W-1] x [0, H-1]`` (or non-finite) return 0 and
    valid=False.
    """
    B, C, H, W = feat.shape
    lead = coords.shape[1:-1]
    flat = coords.reshape(B, -1, 1, 2)
    finite = torch.isfinite(flat).all(-1)
    flat = torch.where(finite.unsqueeze(-1), flat, torch.full_like(flat, -10.0))
    u, v = flat[..., 0], flat[..., 1]
    valid = finite & (u >= -_EDGE_TOL) & (u <= W - 1 + _EDGE_TOL) & (v >= -_EDGE_TOL) & (v <= H - 1 + _EDGE_TOL)
    u, v = u.clamp(0, W - 1), v.clamp(0, H - 1)
    # align_corners=True maps -1/+1 onto the first/last pixel centers
    gx = 2.0 * u / max(W - 1, 1) - 1.0
    gy = 2.0 * v / max(H - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(feat, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    valid = valid.reshape(B, 1, -1, 1)
    out = out * valid.to(out.dtype)
    return out.reshape(B, C, *lead), valid.reshape(B, *lead)


def bilinear_sample(grid, coords) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample an (H, W, C) grid at a list of (u, v) coordinates.

    Returns values (N, C) and a valid mask (N,); out-of-range coordinates give
    zeros with valid=False.
    """
    grid = torch.as_tensor(grid)
    coords = torch.as_tensor(coords, dtype=grid.dtype)
    if grid.ndim == 2:
        grid = grid.unsqueeze(-1)
    feat = grid.permute(2, 0, 1).unsqueeze(0)
    vals, valid = sample_feature_map(feat, coords.reshape(1, -1, 2))
    return vals[0].T, valid[0]


def warp_features(src_feat: torch.Tensor, ref: CameraTensors, src: CameraTensors,
                  depth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp (B,C,Hs,Ws) source features onto the reference grid at each hypothesis.

    depth: (B, D, H, W) world depths. Returns (B, C, D, H, W) and mask (B, D, H, W).
    """
    coords, in_view = warp_coords(ref, src, depth, src_feat.shape[-2:])
    warped, ok = sample_feature_map(src_feat, coords)
    valid = in_view & ok
    return warped * valid.unsqueeze(1).to(warped.dtype), valid


def backproject_depth(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """(H, W) depth map -> (H, W, 3) world points."""
    H, W = depth.shape
    pix = pixel_grid(H, W, torch.float64).numpy()
    rays = np.linalg.solve(cam.intrinsics, pix)
    X_cam = rays * depth.reshape(1, -1)
    X = cam.rotation.T @ (X_cam - cam.translation.reshape(3, 1))
    return X.T.reshape(H, W, 3)


def project_points(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3) world points -> (N, 2) pixels and (N,) depths."""
    X = points @ cam.rotation.T + cam.translation
    uvw = X @ cam.intrinsics.T
    z = uvw[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / z
    return uv, X[:, 2]
