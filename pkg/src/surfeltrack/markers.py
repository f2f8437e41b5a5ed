"""Fiducial marker extraction and frame-to-frame linking.

Markers are saturated green disks painted on the observed surface.
Detection thresholds the image in HSV space and keeps connected
components that are large and round enough; tracking links detections
to trajectories greedily by pixel distance, closest pairs first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass
class MarkerConfig:
    hue_range: tuple = (0.2, 0.5)   # fraction of the hue circle; green
    sat_min: float = 0.4
    val_min: float = 0.2
    min_area_px: float = 8.0
    # 4*pi*A/P^2 with a crack-count perimeter. Digital disks score about
    # pi^2/16 ~ 0.62, thin smears far less; the gate rejects smears.
    circ_min: float = 0.35
    max_jump_px: float = 10.0


@dataclass
class Trajectory:
    """One tracked point: pixel position per frame, NaN rows where unseen."""
    id: int
    points: np.ndarray  # (n_frames, 2) [u, v]

    @property
    def visible(self) -> np.ndarray:
        return ~np.isnan(self.points[:, 0])

    def first_visible(self) -> int:
        idx = np.nonzero(self.visible)[0]
        if len(idx) == 0:
            raise ValueError(f"trajectory {self.id} has no visible frames")
        return int(idx[0])


def detect_markers(rgb: np.ndarray, cfg: MarkerConfig | None = None
                   ) -> np.ndarray:
    """Marker centroids in one image as an (M, 2) [u, v] array.

    Rows are sorted by (v, u) so the output order is reproducible. An
    image without markers yields an empty (0, 2) array.
    """
    cfg = cfg or MarkerConfig()
    u8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    hsv = np.asarray(Image.fromarray(u8, "RGB").convert("HSV")) / 255.0
    mask = ((hsv[..., 0] >= cfg.hue_range[0])
            & (hsv[..., 0] <= cfg.hue_range[1])
            & (hsv[..., 1] >= cfg.sat_min) & (hsv[..., 2] >= cfg.val_min))
    comp, n = ndimage.label(mask)
    if n == 0:
        return np.zeros((0, 2))
    centers = []
    for i, sl in enumerate(ndimage.find_objects(comp), start=1):
        m = comp[sl] == i
        area = float(m.sum())
        if area < cfg.min_area_px:
            continue
        pad = np.pad(m, 1)
        perim = float(np.sum(pad[1:, :] != pad[:-1, :])
                      + np.sum(pad[:, 1:] != pad[:, :-1]))
        if 4.0 * np.pi * area / perim ** 2 < cfg.circ_min:
            continue
        vs, us = np.nonzero(m)
        centers.append((us.mean() + sl[1].start, vs.mean() + sl[0].start))
    if not centers:
        return np.zeros((0, 2))
    uv = np.array(centers, dtype=float)
    return uv[np.lexsort((uv[:, 0], uv[:, 1]))]


def track_markers(detections: list, max_jump_px: float = 10.0
                  ) -> list[Trajectory]:
    """Link per-frame detection lists into trajectories.

    Greedy nearest-neighbor: candidate (trajectory, detection) pairs
    are taken closest-first; pairs farther than max_jump_px never link.
    Unmatched detections open new trajectories, unmatched trajectories
    keep a gap for the frame and stay alive at their last seen position.
    """
    n_frames = len(detections)
    points: list[np.ndarray] = []   # per trajectory: (n_frames, 2)
    last: list[np.ndarray] = []     # last seen position per trajectory
    for t, dets in enumerate(detections):
        dets = np.asarray(dets, dtype=float).reshape(-1, 2)
        pairs = []
        for i, pos in enumerate(last):
            d = np.linalg.norm(dets - pos, axis=1)
            for j in np.nonzero(d <= max_jump_px)[0]:
                pairs.append((d[j], i, int(j)))
        pairs.sort()
        used_traj, used_det = set(), set()
        for d, i, j in pairs:
            if i in used_traj or j in used_det:
                continue
            used_traj.add(i)
            used_det.add(j)
            points[i][t] = dets[j]
            last[i] = dets[j]
        for j in range(len(dets)):
            if j not in used_det:
                fresh = np.full((n_frames, 2), np.nan)
                fresh[t] = dets[j]
                points.append(fresh)
                last.append(dets[j])
    return [Trajectory(id=i, points=p) for i, p in enumerate(points)]


def save_trajectories(path, trajectories: list[Trajectory]) -> None:
    """Write visible trajectory samples as CSV rows (frame, id, u, v)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "id", "u", "v"])
        for traj in trajectories:
            for t in np.nonzero(traj.visible)[0]:
                out.writerow([int(t), traj.id,
                              f"{traj.points[t, 0]:.6f}",
                              f"{traj.points[t, 1]:.6f}"])


def load_trajectories(path, n_frames: int | None = None) -> list[Trajectory]:
    """Read a CSV written by save_trajectories; empty file gives []."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and header[:2] != ["frame", "id"]:
            rows.append(header)  # headerless file: first line was data
        rows.extend(reader)
    if not rows:
        return []
    frames = np.array([int(r[0]) for r in rows])
    ids = np.array([int(r[1]) for r in rows])
    uv = np.array([[float(r[2]), float(r[3])] for r in rows])
    if n_frames is None:
        n_frames = int(frames.max()) + 1
    keep = frames < n_frames  # a shortened run only scores its prefix
    frames, ids, uv = frames[keep], ids[keep], uv[keep]
    if not keep.any():
        return []
    out = []
    for tid in np.unique(ids):
        pts = np.full((n_frames, 2), np.nan)
        sel = ids == tid
        pts[frames[sel]] = uv[sel]
        out.append(Trajectory(id=int(tid), points=pts))
    return out
