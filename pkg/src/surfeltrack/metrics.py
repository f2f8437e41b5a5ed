"""Tracking accuracy against marker ground truth.

Each ground-truth trajectory is anchored once, at its first visible
frame, to the nearest projected model point; from then on the error is
the pixel distance between that point's reprojection and the marker.
Points whose ground-truth position lies near a class boundary are
additionally pooled into a boundary subset, where non-rigid trackers
typically degrade first.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, project
from .markers import Trajectory


@dataclass
class EvalConfig:
    anchor_radius_px: float = 3.0
    boundary_band_px: float = 20.0


def boundary_distance(labels: np.ndarray) -> np.ndarray:
    """Per-pixel distance to the nearest class boundary, inf if none."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    if not edge.any():
        return np.full(labels.shape, np.inf)
    return ndimage.distance_transform_edt(~edge)


def anchor_point(snapshot, pixel: np.ndarray, K: CameraIntrinsics,
                 radius_px: float) -> int:
    """Id of the projected snapshot point nearest to pixel, or -1."""
    uv = project(np.asarray(snapshot["positions"]), K)
    d = np.linalg.norm(uv - pixel, axis=1)
    j = int(np.argmin(d))
    return int(snapshot["ids"][j]) if d[j] <= radius_px else -1


def _locate(snapshot, wanted: int) -> np.ndarray | None:
    ids = np.asarray(snapshot["ids"])
    order = np.argsort(ids)
    k = np.searchsorted(ids[order], wanted)
    if k == len(ids) or ids[order[k]] != wanted:
        return None
    return np.asarray(snapshot["positions"])[order[k]]


def reprojection_error(snapshots: list, trajectories: list[Trajectory],
                       K: CameraIntrinsics, labels: list | None = None,
                       cfg: EvalConfig | None = None) -> dict:
    """Reprojection-error report over a tracked sequence.

    snapshots: per-frame mappings with "ids" and "positions" (the model
    state after processing that frame). labels: optional per-frame label
    maps feeding the boundary subset. Trajectories with no model point
    within anchor_radius_px at their first visible frame are excluded
    with a warning.
    """
    cfg = cfg or EvalConfig()
    n_frames = min(len(snapshots),
                   max((len(t.points) for t in trajectories), default=0))
    errors = np.full((n_frames, len(trajectories)), np.nan)
    near_edge = np.zeros((n_frames, len(trajectories)), dtype=bool)
    dist_fields = None
    if labels is not None:
        dist_fields = [boundary_distance(np.asarray(l)) for l in labels]

    n_used = 0
    for p, traj in enumerate(trajectories):
        t0 = traj.first_visible()
        if t0 >= n_frames:
            continue
        anchor = anchor_point(snapshots[t0], traj.points[t0], K,
                              cfg.anchor_radius_px)
        if anchor < 0:
            warnings.warn(f"trajectory {traj.id}: no model point within "
                          f"{cfg.anchor_radius_px} px at frame {t0}, excluded")
            continue
        n_used += 1
        for t in range(t0, n_frames):
            if not traj.visible[t]:
                continue
            pos = _locate(snapshots[t], anchor)
            if pos is None:
                continue  # anchored point deleted; gap, not an error
            gt = traj.points[t]
            errors[t, p] = float(np.linalg.norm(project(pos[None], K)[0] - gt))
            if dist_fields is not None and t < len(dist_fields):
                v = int(round(gt[1])), int(round(gt[0]))
                h, w = dist_fields[t].shape
                if 0 <= v[0] < h and 0 <= v[1] < w:
                    near_edge[t, p] = (dist_fields[t][v]
                                       <= cfg.boundary_band_px)

    def pool(mask):
        vals = errors[mask & np.isfinite(errors)]
        if vals.size == 0:
            return {"mean_px": None, "std_px": None, "count": 0}
        return {"mean_px": float(vals.mean()), "std_px": float(vals.std()),
                "count": int(vals.size)}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN frames
        per_frame = np.nanmean(errors, axis=1)
    return {
        "overall": pool(np.ones_like(near_edge)),
        "boundary": pool(near_edge),
        "per_frame_mean_px": [None if math.isnan(v) else float(v)
                              for v in per_frame],
        "n_trajectories": n_used,
        "n_excluded": len(trajectories) - n_used,
    }


def track_error_3d(snapshots: list, trajectories: list[Trajectory],
                   tracks_3d: np.ndarray, K: CameraIntrinsics,
                   cfg: EvalConfig | None = None) -> np.ndarray:
    """Per-frame, per-marker 3D distance between anchored model points
    and ground-truth tracks; NaN where unanchored or missing.

    Correspondence is positional: trajectories[p] must be the marker
    behind tracks_3d[:, p]. Pass the generator's aligned lists; a CSV
    reload drops never-visible markers and would break the pairing."""
    cfg = cfg or EvalConfig()
    n_frames = min(len(snapshots), len(tracks_3d))
    out = np.full((n_frames, len(trajectories)), np.nan)
    for p, traj in enumerate(trajectories):
        t0 = traj.first_visible()
        if t0 >= n_frames:
            continue
        anchor = anchor_point(snapshots[t0], traj.points[t0], K,
                              cfg.anchor_radius_px)
        if anchor < 0:
            continue
        for t in range(t0, n_frames):
            pos = _locate(snapshots[t], anchor)
            if pos is not None:
                out[t, p] = float(np.linalg.norm(pos - tracks_3d[t, p]))
    return out


def write_metrics(path, report: dict) -> None:
    """Dump the report as stable, diffable JSON (sorted keys, no NaN)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
