"""Procedural multi-view scenes with exact ground-truth depth.

Scenes are built in a local frame (the reference camera's frame before a
random rigid transform) from a background plane, tilted discs and spheres.
Every view is rendered by ray casting; surface color is a smooth procedural
function of the 3D hit point, so the rendering is exactly photo-consistent
across views.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera

_PROFILES = {
    # background depth, object depth band, baseline
    "near": dict(background=(6.0, 8.0), objects=(3.0, 5.5), baseline=(1.2, 1.6)),
    "far": dict(background=(30.0, 40.0), objects=(15.0, 27.0), baseline=(5.5, 7.5)),
}


@dataclass(frozen=True)
class SceneSpec:
    height: int = 96
    width: int = 128
    num_views: int = 3
    profile: str = "near"
    num_spheres: int = 2
    num_discs: int = 2
    texture_period: tuple[float, float] = (5.0, 20.0)   # pixels at the background depth
    num_waves: int = 10
    baseline: tuple[float, float] | None = None           # overrides the profile's baseline band
    depth_margin: float = 0.15                            # declared range is [(1-m) min, (1+m) max]

    def __post_init__(self):
        if self.profile not in _PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.num_views < 2:
            raise ValueError("need at least two views")
        if not 0 <= self.depth_margin < 1:
            raise ValueError("depth_margin must lie in [0, 1)")


@dataclass
class _Plane:
    normal: np.ndarray
    point: np.ndarray
    radius: float | None
    albedo: np.ndarray

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.point - o) @ self.normal) / denom
        s = np.where((np.abs(denom) > 1e-12) & (s > 1e-9), s, np.inf)
        if self.radius is not None:
            hit = o + s[:, None] * d
            far = np.linalg.norm(np.where(np.isfinite(hit), hit, 0) - self.point, axis=1) > self.radius
            s = np.where(far, np.inf, s)
        return s


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        a = np.sum(d * d, axis=1)
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0))
        s0 = (-b - sq) / a
        s1 = (-b + sq) / a
        s = np.where(s0 > 1e-9, s0, np.where(s1 > 1e-9, s1, np.inf))
        return np.where(disc >= 0, s, np.inf)


@dataclass
class SyntheticScene:
    """Rendered views of one procedural scene.

    images: (N, H, W, 3) float32 in [0, 1]; depths: (N, H, W) float64 camera
    depths; cameras: world-frame cameras with per-view depth ranges.
    """

    images: np.ndarray
    depths: np.ndarray
    cameras: list[Camera]
    spec: SceneSpec
    seed: int
    primitives: list = field(repr=False, default_factory=list)
    _to_world: tuple = field(repr=False, default=None)
    _local_cams: list = field(repr=False, default_factory=list)
    _texture: tuple = field(repr=False, default=None)

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def raycast(self, view: int, pixels: np.ndarray):
        """Cast rays through (N, 2) pixels of ``view``.

        Returns camera depths (inf where nothing is hit), world hit points
        and the index of the hit primitive.
        """
        o, d = self._rays(view, pixels)
        s_all = np.stack([p.intersect(o, d) for p in self.primitives])
        idx = np.argmin(s_all, axis=0)
        s = s_all[idx, np.arange(len(idx))]
        hit = o + np.where(np.isfinite(s), s, 0)[:, None] * d
        return s, self._local_to_world(hit), idx

    def world_points(self, view: int = 0) -> np.ndarray:
        """(H, W, 3) world points seen by every pixel of ``view``."""
        H, W = self.spec.height, self.spec.width
        v, u = np.mgrid[0:H, 0:W]
        _, X, _ = self.raycast(view, np.stack([u.ravel(), v.ravel()], 1).astype(np.float64))
        return X.reshape(H, W, 3)

    def texture(self, world_points: np.ndarray) -> np.ndarray:
        return _shade(self._world_to_local(world_points), self._texture)

    def _rays(self, view, pixels):
        R, t, K = self._local_cams[view]
        uv1 = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
        d_cam = np.linalg.solve(K, uv1.T).T                 # z component is 1
        d = d_cam @ R                                       # R^T d_cam
        o = np.broadcast_to(-R.T @ t, d.shape)
        return o, d

    def _local_to_world(self, X):
        Q, c = self._to_world
        return X @ Q.T + c

    def _world_to_local(self, X):
        Q, c = self._to_world
        return (X - c) @ Q


def _random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx


def _look_at(center, target):
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def _shade(X, texture):
    dirs, freqs, phases, amps = texture
    # (N, waves) phases per channel
    arg = X @ dirs.T * freqs
    out = np.empty((len(X), 3))
    for ch in range(3):
        out[:, ch] = 0.5 + np.sum(amps[ch] * np.sin(arg + phases[ch]), axis=1)
    return out


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SyntheticScene:
    """Deterministically build and render one scene from ``seed``."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    prof = _PROFILES[spec.profile]
    H, W = spec.height, spec.width

    f = W * rng.uniform(0.95, 1.15)
    K = np.array([[f, 0, (W - 1) / 2 + rng.uniform(-2, 2)],
                  [0, f, (H - 1) / 2 + rng.uniform(-2, 2)],
                  [0, 0, 1.0]])

    # geometry in the local frame (reference camera at the origin looking along +z)
    bg_depth = rng.uniform(*prof["background"])
    n = np.array([0, 0, -1.0]) @ _random_rotation(rng, np.deg2rad(25)).T
    prims: list = [_Plane(n / np.linalg.norm(n), np.array([0, 0, bg_depth]), None, rng.uniform(-0.1, 0.1, 3))]
    half_fov = np.array([(W / 2) / f, (H / 2) / f])
    for _ in range(spec.num_discs):
        z = rng.uniform(*prof["objects"])
        c = np.array([*(rng.uniform(-0.6, 0.6, 2) * half_fov * z), z])
        nn_ = np.array([0, 0, -1.0]) @ _random_rotation(rng, np.deg2rad(40)).T
        prims.append(_Plane(nn_ / np.linalg.norm(nn_), c, rng.uniform(0.15, 0.3) * z, rng.uniform(-0.1, 0.1, 3)))
    for _ in range(spec.num_spheres):
        z = rng.uniform(*prof["objects"])
        c = np.array([*(rng.uniform(-0.6, 0.6, 2) * half_fov * z), z])
        prims.append(_Sphere(c, rng.uniform(0.08, 0.16) * z, rng.uniform(-0.1, 0.1, 3)))

    # texture: waves with pixel periods in the configured band at background depth
    waves = spec.num_waves
    dirs = rng.normal(size=(waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    periods_px = np.exp(rng.uniform(*np.log(spec.texture_period), size=waves))
    freqs = 2 * np.pi * f / (periods_px * bg_depth)
    phases = rng.uniform(0, 2 * np.pi, size=(3, waves))
    amps = rng.uniform(0.5, 1.0, size=(3, waves))
    amps *= 0.45 / amps.sum(axis=1, keepdims=True)
    texture = (dirs, freqs, phases, amps)

    # cameras in the local frame
    target = np.array([0, 0, 0.5 * (bg_depth + np.mean(prof["objects"]))])
    local_cams = [(np.eye(3), np.zeros(3), K)]
    for i in range(1, spec.num_views):
        ang = 2 * np.pi * (i - 1) / (spec.num_views - 1) + rng.uniform(-0.4, 0.4)
        b = rng.uniform(*(spec.baseline or prof["baseline"]))
        center = np.array([b * np.cos(ang), b * np.sin(ang), rng.uniform(-0.1, 0.1) * b])
        R, t = _look_at(center, target)
        R = _random_rotation(rng, np.deg2rad(1.0)) @ R
        local_cams.append((R, -R @ center, K))

    for R, t, _ in local_cams:
        center = -R.T @ t
        for p in prims:
            if isinstance(p, _Sphere) and np.linalg.norm(center - p.center) <= p.radius:
                raise ValueError("degenerate camera placement: camera inside a sphere")
        if (center - prims[0].point) @ prims[0].normal <= 0:
            raise ValueError("degenerate camera placement: camera behind the background")

    Q = _random_rotation(rng, np.pi)
    offset = rng.normal(size=3) * 2.0
    scene = SyntheticScene(np.zeros(0), np.zeros(0), [], spec, seed, prims, (Q, offset), local_cams, texture)

    v, u = np.mgrid[0:H, 0:W]
    pix = np.stack([u.ravel(), v.ravel()], 1).astype(np.float64)
    images, depths, cams = [], [], []
    for view, (R, t, Kv) in enumerate(local_cams):
        s, _, idx = scene.raycast(view, pix)
        if not np.isfinite(s).all():
            raise ValueError("degenerate camera placement: rays miss the scene")
        o, d = scene._rays(view, pix)
        X_local = o + s[:, None] * d
        color = _shade(X_local, texture)
        color += np.stack([prims[j].albedo for j in idx])
        images.append(np.clip(color, 0, 1).reshape(H, W, 3).astype(np.float32))
        depth = s.reshape(H, W)
        depths.append(depth)
        # world-frame extrinsics: X_local = Q^T (X_w - offset)
        Rw = R @ Q.T
        tw = t - Rw @ offset
        cams.append(Camera(Kv, Rw, tw, ((1 - spec.depth_margin) * depth.min(), (1 + spec.depth_margin) * depth.max())))
    scene.images = np.stack(images)
    scene.depths = np.stack(depths)
    scene.cameras = cams
    return scene


def generate_dataset(num_scenes: int, seed: int = 0, spec: SceneSpec | None = None,
                     max_tries: int = 20) -> list[SyntheticScene]:
    """``num_scenes`` scenes with seeds derived from ``seed``; degenerate draws are skipped."""
    scenes, ss = [], np.random.SeedSequence(seed)
    for child in ss.spawn(num_scenes):
        base = int(child.generate_state(1)[0])
        for attempt in range(max_tries):
            try:
                scenes.append(generate_scene(base + attempt, spec))
                break
            except ValueError:
                continue
        else:
            raise RuntimeError("could not place cameras for a scene")
    return scenes
