"""Synthetic two-class test sequences with exact ground truth.

The scene is a fronto-parallel plane at depth z0 carrying two flat-
colored class regions split along a fixed material line. A Gaussian-
envelope bump, sinusoidal in time, travels across the surface while the
whole plane may drift rigidly. Everything painted on the surface (class
colors, shading, marker disks) is attached to material surface
coordinates, so consecutive frames depict one physical surface in
motion rather than repainted geometry.

Depth is rendered exactly: each pixel ray is intersected with the
displaced surface by fixed-point iteration on z, so a recorded marker
depth agrees with the analytic surface to solver precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, project
from .frames import Frame, FrameMeta, save_frame_arrays, save_meta
from .markers import Trajectory, save_trajectories

CLASS_COLORS = np.array([(0.55, 0.33, 0.24),   # class 0: dark meat
                         (0.86, 0.77, 0.62)])  # class 1: pale meat
MARKER_COLOR = np.array([0.08, 0.86, 0.18])
_LIGHT = np.array([0.25, -0.15, 0.95]) / np.linalg.norm([0.25, -0.15, 0.95])


@dataclass
class SynthConfig:
    width: int = 640
    height: int = 480
    fx: float = 525.0
    fy: float = 525.0
    n_frames: int = 30
    z0_m: float = 0.8
    # bump: height amplitude, sin^2 period (frames), Gaussian footprint,
    # material start center and per-frame travel (meters)
    amplitude_m: float = 0.010
    period_frames: float = 30.0
    bump_sigma_m: float = 0.035
    bump_center_m: tuple = (0.04, 0.0)
    bump_velocity_m: tuple = (0.003, 0.0)
    split_x_m: float = 0.0            # class 1 where material X > split
    translation_m: tuple = (0.0, 0.0, 0.0)  # rigid drift per frame
    marker_grid: tuple = (3, 3)
    marker_extent_m: tuple = (0.22, 0.16)
    marker_radius_px: float = 4.0
    depth_noise_m: float = 0.0
    label_flip_band_px: float = 0.0   # flip labels this close to the boundary
    label_flip_prob: float = 0.0
    sem_top: float = 0.9              # probability mass on the true class
    shading: float = 0.25             # diffuse fraction of the lambert term
    depth_scale: float = 1e-4

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")
        if self.amplitude_m < 0:
            raise ValueError("amplitude_m must be nonnegative")
        if self.period_frames <= 0 or self.bump_sigma_m <= 0:
            raise ValueError("period_frames and bump_sigma_m must be positive")
        if self.marker_radius_px <= 0:
            raise ValueError("marker_radius_px must be positive")
        if not 0.5 < self.sem_top <= 1.0:
            raise ValueError("sem_top must be in (0.5, 1]")
        if not 0.0 <= self.label_flip_prob <= 1.0:
            raise ValueError("label_flip_prob must be in [0, 1]")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.fx, fy=self.fy,
                                cx=(self.width - 1) / 2.0,
                                cy=(self.height - 1) / 2.0,
                                width=self.width, height=self.height)

    @property
    def meta(self) -> FrameMeta:
        return FrameMeta(height=self.height, width=self.width, n_classes=2,
                         depth_scale=self.depth_scale,
                         intrinsics=self.intrinsics,
                         class_names=("region_a", "region_b"))


@dataclass
class SyntheticSequence:
    frames: list
    trajectories: list            # ground-truth Trajectory per marker
    tracks_3d: np.ndarray         # (n_frames, n_markers, 3) camera coords
    meta: FrameMeta
    config: SynthConfig = field(repr=False, default=None)


def _bump(cfg: SynthConfig, X, Y, t):
    """Height field and its material-coordinate gradient at frame t."""
    amp = cfg.amplitude_m * math.sin(math.pi * t / cfg.period_frames) ** 2
    bx = cfg.bump_center_m[0] + cfg.bump_velocity_m[0] * t
    by = cfg.bump_center_m[1] + cfg.bump_velocity_m[1] * t
    s2 = cfg.bump_sigma_m ** 2
    g = amp * np.exp(-((X - bx) ** 2 + (Y - by) ** 2) / (2.0 * s2))
    return g, -g * (X - bx) / s2, -g * (Y - by) / s2


def _surface_depth(cfg: SynthConfig, t: int, us, vs):
    """Ray/surface intersection: depth plus material coords per pixel.

    The surface point seen along a pixel ray satisfies
        z = z0 + tz*t - psi(X, Y, t),  X = x - tx*t,  Y = y - ty*t
    with (x, y) the ray coordinates at depth z. psi has small slope, so
    fixed-point iteration on z contracts quickly.
    """
    K = cfg.intrinsics
    tx, ty, tz = (c * t for c in cfg.translation_m)
    z = np.full(np.shape(us), cfg.z0_m + tz, dtype=float)
    for _ in range(80):
        X = (us - K.cx) * z / K.fx - tx
        Y = (vs - K.cy) * z / K.fy - ty
        psi, _, _ = _bump(cfg, X, Y, t)
        z_new = cfg.z0_m + tz - psi
        if np.max(np.abs(z_new - z)) < 1e-13:
            z = z_new
            break
        z = z_new
    X = (us - K.cx) * z / K.fx - tx
    Y = (vs - K.cy) * z / K.fy - ty
    return z, X, Y


def _marker_material_points(cfg: SynthConfig) -> np.ndarray:
    nx, ny = cfg.marker_grid
    xs = np.linspace(-cfg.marker_extent_m[0], cfg.marker_extent_m[0], nx)
    ys = np.linspace(-cfg.marker_extent_m[1], cfg.marker_extent_m[1], ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _flip_labels(labels, band_px, prob, rng):
    edge = np.zeros_like(labels, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    if not edge.any():
        return labels
    dist = ndimage.distance_transform_edt(~edge)
    flip = (dist <= band_px) & (rng.random(labels.shape) < prob)
    return np.where(flip, 1 - labels, labels)


def generate_synthetic(cfg: SynthConfig, seed: int = 0) -> SyntheticSequence:
    """Render the configured sequence; same config and seed, same bits."""
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics
    us, vs = np.meshgrid(np.arange(cfg.width, dtype=float),
                         np.arange(cfg.height, dtype=float))
    material = _marker_material_points(cfg)
    n_markers = len(material)

    frames = []
    tracks = np.zeros((cfg.n_frames, n_markers, 3))
    traj_pts = np.full((n_markers, cfg.n_frames, 2), np.nan)
    for t in range(cfg.n_frames):
        z, X, Y = _surface_depth(cfg, t, us, vs)
        psi, psi_x, psi_y = _bump(cfg, X, Y, t)

        labels = (X > cfg.split_x_m).astype(np.int64)
        noisy = labels
        if cfg.label_flip_prob > 0 and cfg.label_flip_band_px > 0:
            noisy = _flip_labels(labels, cfg.label_flip_band_px,
                                 cfg.label_flip_prob, rng)
        sem = np.where(noisy[..., None] == np.arange(2),
                       cfg.sem_top, 1.0 - cfg.sem_top)

        # lambert shading against the analytic surface normal
        norm = np.sqrt(1.0 + psi_x ** 2 + psi_y ** 2)
        lambert = (psi_x * _LIGHT[0] + psi_y * _LIGHT[1] + _LIGHT[2]) / norm
        shade = (1.0 - cfg.shading) + cfg.shading * np.clip(lambert, 0.0, 1.0)
        rgb = CLASS_COLORS[labels] * shade[..., None]

        # markers ride the surface: material point -> world -> pixel disk
        tx, ty, tz = (c * t for c in cfg.translation_m)
        m_psi, _, _ = _bump(cfg, material[:, 0], material[:, 1], t)
        world = np.stack([material[:, 0] + tx, material[:, 1] + ty,
                          cfg.z0_m + tz - m_psi], axis=1)
        tracks[t] = world
        uv = project(world, K)
        for m in range(n_markers):
            mu, mv = uv[m]
            if not (0 <= mu <= cfg.width - 1 and 0 <= mv <= cfg.height - 1):
                continue
            traj_pts[m, t] = (mu, mv)
            d = np.hypot(us - mu, vs - mv)
            alpha = np.clip(cfg.marker_radius_px + 0.5 - d, 0.0, 1.0)
            rgb = rgb * (1 - alpha[..., None]) + MARKER_COLOR * alpha[..., None]

        depth = z
        if cfg.depth_noise_m > 0:
            depth = z + rng.normal(0.0, cfg.depth_noise_m, z.shape)
        frames.append(Frame(index=t, rgb=np.clip(rgb, 0.0, 1.0), depth=depth,
                            sem_probs=sem, intrinsics=K))

    trajectories = [Trajectory(id=m, points=traj_pts[m])
                    for m in range(n_markers)]
    return SyntheticSequence(frames=frames, trajectories=trajectories,
                             tracks_3d=tracks, meta=cfg.meta, config=cfg)


def write_sequence(seq: SyntheticSequence, out_dir) -> None:
    """Write the ingestion file layout plus the ground-truth CSV."""
    out = Path(out_dir)
    save_meta(out, seq.meta)
    for frame in seq.frames:
        save_frame_arrays(out, frame.index, frame.rgb, frame.depth,
                          frame.sem_probs, seq.meta.depth_scale)
    save_trajectories(out / "trajectories.csv", seq.trajectories)
