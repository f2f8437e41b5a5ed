"""Pinhole camera model: intrinsics, projection, and back-projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_DEPTH = 1e-6


class ProjectionError(ValueError):
    """Raised when a point cannot be projected (at or behind the camera)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


def project(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to pixel coordinates (u, v).

    Accepts a single 3-vector or an (N, 3) array. Results may lie outside
    the image bounds; points at or behind the camera raise ProjectionError.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise ProjectionError("behind camera")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = K.fx * pts[:, 0] / z + K.cx
    uv[:, 1] = K.fy * pts[:, 1] / z + K.cy
    return uv[0] if single else uv


def project_valid(points: np.ndarray, K: CameraIntrinsics,
                  min_depth: float = MIN_DEPTH) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection that flags rather than raises on bad depth.

    Returns (uv, in_front) where rows of uv are undefined wherever
    in_front is False.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    z = pts[:, 2]
    ok = z > min_depth
    zsafe = np.where(ok, z, 1.0)
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = K.fx * pts[:, 0] / zsafe + K.cx
    uv[:, 1] = K.fy * pts[:, 1] / zsafe + K.cy
    return uv, ok


def backproject(depth: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift a depth map (meters, 0 = invalid) to a camera-frame point map.

    Returns (points, valid): points is (H, W, 3) with
    points[v, u] = depth * ((u-cx)/fx, (v-cy)/fy, 1), valid is the
    depth > 0 mask. Invalid pixels hold zeros.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    u = np.arange(w, dtype=float)
    v = np.arange(h, dtype=float)
    xdir = (u - K.cx) / K.fx
    ydir = (v - K.cy) / K.fy
    points = np.zeros((h, w, 3))
    points[:, :, 0] = depth * xdir[None, :]
    points[:, :, 1] = depth * ydir[:, None]
    points[:, :, 2] = depth
    valid = depth > 0
    points[~valid] = 0.0
    return points, valid


def projection_jacobian(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(u, v)/d(x, y, z) for each camera-frame point, shape (N, 2, 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    J = np.zeros((pts.shape[0], 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    return J
