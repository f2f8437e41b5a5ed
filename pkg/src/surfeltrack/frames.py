"""Frame I/O and per-frame observation maps.

Directory layout per sequence:
    {seq}/rgb/{index:06}.png     8-bit RGB
    {seq}/depth/{index:06}.png   16-bit grayscale, meters = value * depth_scale
    {seq}/seg/{index:06}.bin     raw little-endian float32, H*W*C row-major
    {seq}/meta.json              H, W, C, depth_scale, intrinsics, class names

Depth 0 encodes an invalid measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, backproject


class FrameLoadError(ValueError):
    pass


@dataclass(frozen=True)
class FrameMeta:
    height: int
    width: int
    n_classes: int
    depth_scale: float
    intrinsics: CameraIntrinsics
    class_names: tuple

    def to_dict(self) -> dict:
        return {
            "H": self.height, "W": self.width, "C": self.n_classes,
            "depth_scale": self.depth_scale,
            "fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
            "cx": self.intrinsics.cx, "cy": self.intrinsics.cy,
            "classes": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameMeta":
        K = CameraIntrinsics(fx=float(d["fx"]), fy=float(d["fy"]),
                             cx=float(d["cx"]), cy=float(d["cy"]),
                             width=int(d["W"]), height=int(d["H"]))
        return cls(height=int(d["H"]), width=int(d["W"]), n_classes=int(d["C"]),
                   depth_scale=float(d["depth_scale"]), intrinsics=K,
                   class_names=tuple(d["classes"]))


@dataclass
class Frame:
    index: int
    rgb: np.ndarray        # (H,W,3) in [0,1]
    depth: np.ndarray      # (H,W) meters, 0 invalid
    sem_probs: np.ndarray  # (H,W,C) per-pixel simplex
    intrinsics: CameraIntrinsics

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.sem_probs, axis=2)


@dataclass
class ObservationMaps:
    points: np.ndarray   # (H,W,3) back-projected, zeros where invalid
    normals: np.ndarray  # (H,W,3) unit, camera-facing, zeros where invalid
    valid: np.ndarray    # (H,W) bool: depth valid AND normal defined


def frame_paths(seq_dir, index: int):
    seq = Path(seq_dir)
    name = f"{index:06d}"
    return (seq / "rgb" / f"{name}.png", seq / "depth" / f"{name}.png",
            seq / "seg" / f"{name}.bin")


def load_meta(seq_dir) -> FrameMeta:
    path = Path(seq_dir) / "meta.json"
    if not path.exists():
        raise FrameLoadError(f"missing file: {path}")
    with open(path) as fh:
        return FrameMeta.from_dict(json.load(fh))


def save_meta(seq_dir, meta: FrameMeta) -> None:
    seq = Path(seq_dir)
    seq.mkdir(parents=True, exist_ok=True)
    with open(seq / "meta.json", "w") as fh:
        json.dump(meta.to_dict(), fh, indent=2, sort_keys=True)


def load_frame(seq_dir, index: int, meta: FrameMeta | None = None) -> Frame:
    """Decode one frame; depth scaled to meters, sem_probs renormalized.

    Raises FrameLoadError on a missing file, a dimension mismatch against
    meta.json, a seg payload whose byte length != 4*H*W*C, or non-finite
    values in any map.
    """
    if meta is None:
        meta = load_meta(seq_dir)
    rgb_path, depth_path, seg_path = frame_paths(seq_dir, index)
    for p in (rgb_path, depth_path, seg_path):
        if not p.exists():
            raise FrameLoadError(f"missing file: {p}")

    rgb_img = np.asarray(Image.open(rgb_path))
    if rgb_img.ndim != 3 or rgb_img.shape[2] != 3:
        raise FrameLoadError(f"dimension mismatch: rgb must be HxWx3, got {rgb_img.shape}")
    depth_raw = np.asarray(Image.open(depth_path)).astype(np.uint16)
    if rgb_img.shape[:2] != (meta.height, meta.width):
        raise FrameLoadError(
            f"dimension mismatch: rgb is {rgb_img.shape[:2]}, "
            f"meta says {(meta.height, meta.width)}")
    if depth_raw.shape != (meta.height, meta.width):
        raise FrameLoadError(
            f"dimension mismatch: depth is {depth_raw.shape}, "
            f"meta says {(meta.height, meta.width)}")

    payload = seg_path.read_bytes()
    expected = 4 * meta.height * meta.width * meta.n_classes
    if len(payload) != expected:
        raise FrameLoadError(
            f"dimension mismatch: seg payload is {len(payload)} bytes, "
            f"expected {expected}")
    sem = np.frombuffer(payload, dtype="<f4").reshape(
        meta.height, meta.width, meta.n_classes).astype(float)
    if not np.all(np.isfinite(sem)):
        raise FrameLoadError(f"non-finite values in seg map {seg_path}")

    rgb = rgb_img.astype(float) / 255.0
    depth = depth_raw.astype(float) * meta.depth_scale
    # Tolerate quantization: clamp negatives, renormalize each pixel,
    # fall back to uniform where the row is all zero.
    sem = np.clip(sem, 0.0, None)
    sums = sem.sum(axis=2, keepdims=True)
    uniform = np.full(meta.n_classes, 1.0 / meta.n_classes)
    sem = np.where(sums > 1e-12, sem / np.where(sums > 1e-12, sums, 1.0), uniform)
    return Frame(index=index, rgb=rgb, depth=depth, sem_probs=sem,
                 intrinsics=meta.intrinsics)


def save_frame_arrays(seq_dir, index: int, rgb: np.ndarray, depth_m: np.ndarray,
                      sem_probs: np.ndarray, depth_scale: float) -> None:
    """Quantize and write one frame in the sequence layout."""
    rgb_path, depth_path, seg_path = frame_paths(seq_dir, index)
    for p in (rgb_path, depth_path, seg_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    rgb_u8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb_u8, mode="RGB").save(rgb_path)
    ticks = np.clip(np.round(np.asarray(depth_m) / depth_scale), 0, 65535)
    depth_u16 = np.ascontiguousarray(ticks, dtype="<u2")
    Image.fromarray(depth_u16).save(depth_path)  # 16-bit grayscale PNG
    seg_path.write_bytes(np.ascontiguousarray(sem_probs, dtype="<f4").tobytes())


# 8 neighbors in circular order: E, NE, N, NW, W, SW, S, SE as (dv, du).
_NEIGHBOR_OFFSETS = [(0, 1), (-1, 1), (-1, 0), (-1, -1),
                     (0, -1), (1, -1), (1, 0), (1, 1)]


def _shift(arr: np.ndarray, dv: int, du: int) -> np.ndarray:
    """Shift so out[v,u] = arr[v+dv, u+du]; out-of-range filled with 0."""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    vs = slice(max(0, dv), h + min(0, dv))
    us = slice(max(0, du), w + min(0, du))
    vd = slice(max(0, -dv), h + min(0, -dv))
    ud = slice(max(0, -du), w + min(0, -du))
    out[vd, ud] = arr[vs, us]
    return out


def estimate_normals(points: np.ndarray, valid: np.ndarray):
    """Per-pixel normals from cross products of consecutive neighbor pairs.

    For each pixel with all 8 neighbors valid, take the difference vectors
    to the 8 neighbors in circular order, sum the cross products of
    consecutive pairs, normalize, and orient toward the camera (n.p < 0).
    Any invalid neighbor (or image border) invalidates the output pixel.

    Returns (normals (H,W,3) with zeros where invalid, normal_valid (H,W)).
    """
    points = np.asarray(points, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    diffs = []
    all_valid = valid.copy()
    for dv, du in _NEIGHBOR_OFFSETS:
        diffs.append(_shift(points, dv, du) - points)
        all_valid &= _shift(valid, dv, du)
    # border pixels never have a full 8-neighborhood
    all_valid[0, :] = all_valid[-1, :] = False
    all_valid[:, 0] = all_valid[:, -1] = False

    acc = np.zeros_like(points)
    for k in range(8):
        acc += np.cross(diffs[k], diffs[(k + 1) % 8])
    norms = np.linalg.norm(acc, axis=2)
    ok = all_valid & (norms > 1e-12)
    normals = np.zeros_like(points)
    normals[ok] = acc[ok] / norms[ok, None]
    # camera at origin looking +z: flip any normal pointing away
    flip = ok & (np.sum(normals * points, axis=2) > 0)
    normals[flip] *= -1.0
    return normals, ok


def observation_maps(frame: Frame) -> ObservationMaps:
    """Back-project depth and estimate normals; valid needs both."""
    points, depth_valid = backproject(frame.depth, frame.intrinsics)
    normals, normal_valid = estimate_normals(points, depth_valid)
    valid = depth_valid & normal_valid
    pts = np.where(valid[..., None], points, 0.0)
    return ObservationMaps(points=pts, normals=normals, valid=valid)
