"""Readers/writers for camera text files, PFM maps, PNG images and PLY clouds."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera


def write_cam(path, cam: Camera) -> None:
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(x)) for x in row) for row in cam.extrinsic]
    lines += ["", "intrinsic"]
    lines += [" ".join(repr(float(x)) for x in row) for row in cam.intrinsics]
    lines += ["", f"{cam.depth_range[0]!r} {cam.depth_range[1]!r}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cam(path) -> Camera:
    """Parse a camera file: ``extrinsic`` + 4x4 rows, ``intrinsic`` + 3x3 rows, ``d_min d_max``."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r]
    try:
        i = [r[0] for r in rows].index("extrinsic")
        E = np.array(rows[i + 1:i + 5], dtype=np.float64)
        j = [r[0] for r in rows].index("intrinsic")
        K = np.array(rows[j + 1:j + 4], dtype=np.float64)
        d_min, d_max = (float(x) for x in rows[j + 4][:2])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed camera file {path}: {exc}") from exc
    if E.shape != (4, 4) or K.shape != (3, 3):
        raise ValueError(f"malformed camera file {path}")
    return Camera.from_extrinsic(E, K, (d_min, d_max))


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Write a float32 PFM (bottom-to-top row order, little endian)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    elif data.ndim == 2 or (data.ndim == 3 and data.shape[2] == 1):
        header = "Pf"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    H, W = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{W} {H}\n{-abs(scale)}\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").rstrip()
        if header not in ("PF", "Pf"):
            raise ValueError(f"{path} is not a PFM file")
        dims = re.match(r"^(\d+)\s+(\d+)\s*$", f.readline().decode("ascii"))
        if not dims:
            raise ValueError(f"malformed PFM header in {path}")
        W, H = map(int, dims.groups())
        scale = float(f.readline().decode("ascii").rstrip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")
    shape = (H, W, 3) if header == "PF" else (H, W)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_image(path, img: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None, binary: bool = True) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = len(points)
    props = ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = (np.clip(colors, 0, 1) * 255 + 0.5).astype(np.uint8)
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(["ply", f"format {fmt} 1.0", f"element vertex {n}", *props, "end_header"]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = points.T
            if colors is not None:
                rec["red"], rec["green"], rec["blue"] = colors.T
            f.write(rec.tobytes())
        else:
            for i in range(n):
                row = " ".join(repr(float(x)) for x in points[i])
                if colors is not None:
                    row += " " + " ".join(str(int(c)) for c in colors[i])
                f.write((row + "\n").encode("ascii"))


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int": "i4", "int32": "i4",
              "uint": "u4", "short": "i2", "ushort": "u2"}


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read vertex positions (and RGB if present) from ASCII or binary PLY."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        fmt, n, props, in_vertex = None, 0, [], False
        while True:
            line = f.readline().decode("ascii").strip()
            if line == "end_header":
                break
            tok = line.split()
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append((tok[2], _PLY_TYPES[tok[1]]))
        if fmt == "ascii":
            table = np.loadtxt(f, max_rows=n, ndmin=2)
            rec = {name: table[:, i] for i, (name, _) in enumerate(props)}
        else:
            order = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, order + t) for name, t in props])
            rec = np.frombuffer(f.read(dtype.itemsize * n), dtype=dtype)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    names = [p[0] for p in props]
    colors = None
    if "red" in names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    return points, colors

