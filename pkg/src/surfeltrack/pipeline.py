"""Batch runs: track a sequence end to end, synthesize one, evaluate one.

run_track processes frames strictly in order: load, register against the
current model, commit the solved deformation, fuse the observations,
grow the graph. Artifacts land in the output directory:

    snapshots/{index:06}.npz   model point ids + positions after the frame
    model/{index:06}.ply       surfel cloud snapshots (snapshot_every)
    model/final.ply            last model state
    render/{index:06}.png      optional model re-renders
    params.log                 per-frame flat parameter vectors
    manifest.json              config, per-frame stats, timings
    metrics.json               reprojection report when ground truth exists

A frame the solver refuses (no usable data association) is logged and
skipped without touching the model; hard failures abort the run but
leave everything written so far on disk.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .boundary import build_boundary_field
from .config import PipelineConfig, config_dict, config_hash
from .export import save_surfel_ply
from .frames import frame_paths, load_frame, load_meta, observation_maps
from .fusion import (commit, extend_graph, fuse_frame, init_ed_graph,
                     init_surfels, refresh_skinning)
from .kinematics import DeformationState
from .losses import build_solve_context
from .markers import load_trajectories
from .metrics import reprojection_error, write_metrics
from .optimizer import optimize
from .renderer import splat_render
from .synthetic import generate_synthetic, write_sequence

VERSION = "0.1.0"


def list_frame_indices(seq_dir, max_frames: int | None = None) -> list[int]:
    """Consecutive frame indices from 0 for which all three maps exist."""
    indices = []
    while max_frames is None or len(indices) < max_frames:
        i = len(indices)
        if not all(p.exists() for p in frame_paths(seq_dir, i)):
            break
        indices.append(i)
    if not indices:
        raise FileNotFoundError(f"no frames found in {seq_dir}")
    return indices


def _snapshot(cloud) -> dict:
    return {"ids": cloud.ids.copy(), "positions": cloud.positions.copy()}


def run_track(cfg: PipelineConfig) -> dict:
    """Track the configured sequence; returns the manifest dict."""
    if cfg.sequence is None:
        raise ValueError("track needs a sequence directory (config key "
                         "'sequence')")
    seq = Path(cfg.sequence)
    meta = load_meta(seq)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = list_frame_indices(seq, cfg.max_frames)

    manifest = {"config": config_dict(cfg), "config_hash": config_hash(cfg),
                "version": VERSION, "frames": [], "total_seconds": 0.0}
    params_lines: list[str] = []
    snapshots: list[dict] = []
    label_maps: list[np.ndarray] = []
    cloud = graph = skin_idx = skin_w = None
    t_run = time.perf_counter()
    try:
        for i in indices:
            t0 = time.perf_counter()
            frame = load_frame(seq, i, meta)
            maps = observation_maps(frame)
            entry = {"index": i, "status": "ok", "iterations": 0,
                     "objective_initial": None, "objective_final": None}
            if cloud is None:
                cloud = init_surfels(frame, maps, cfg.fusion)
                graph = init_ed_graph(frame, maps, cfg.fusion)
                skin_idx, skin_w = refresh_skinning(cloud, graph, cfg.fusion)
                state = DeformationState.identity(graph.n_nodes)
                entry["status"] = "init"
            else:
                bf = (build_boundary_field(frame.sem_probs)
                      if cfg.weights.enable_morph else None)

                def build_context(st, frame=frame, maps=maps, bf=bf):
                    return build_solve_context(
                        cloud.positions, cloud.normals, cloud.sem_scores,
                        cloud.labels, cloud.colors, cloud.radii,
                        skin_idx, skin_w, graph.positions, graph.triangles,
                        graph.rest_areas, st, frame, maps, bf, cfg.weights,
                        cfg.render, cfg.dist_thresh_m, cfg.angle_thresh_deg,
                        cfg.ssim_window)

                res = optimize(DeformationState.identity(graph.n_nodes),
                               build_context, cfg.optimizer)
                state = res.state
                entry.update(status=res.status, iterations=res.iterations,
                             objective_initial=res.initial_objective,
                             objective_final=res.final_objective)
                if res.status == "ok":
                    commit(state, cloud, graph, skin_idx, skin_w)
                    stats = fuse_frame(cloud, frame, maps, cfg.fusion)
                    graph, skin_idx, skin_w = extend_graph(
                        graph, cloud, stats.new_ids, cfg.fusion)
                    entry.update(n_fused=stats.n_fused,
                                 n_new=len(stats.new_ids),
                                 n_deleted=stats.n_deleted)
                else:
                    entry["message"] = res.message

            entry.update(n_surfels=len(cloud), n_nodes=graph.n_nodes)
            snapshots.append(_snapshot(cloud))
            label_maps.append(frame.labels.astype(np.uint8))
            params_lines.append(
                f"{i} " + " ".join(f"{v:.9g}" for v in state.to_vector()))

            snap_path = out / "snapshots" / f"{i:06d}.npz"
            snap_path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(snap_path, ids=cloud.ids, positions=cloud.positions)
            if cfg.snapshot_every and i % cfg.snapshot_every == 0:
                save_surfel_ply(out / "model" / f"{i:06d}.ply", cloud)
            if cfg.save_renders:
                img = splat_render(cloud.positions, cloud.colors, cloud.radii,
                                   meta.intrinsics, cfg.render)
                u8 = np.clip(np.round(img.color * 255), 0, 255).astype(np.uint8)
                png = out / "render" / f"{i:06d}.png"
                png.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(u8, mode="RGB").save(png)

            dt = time.perf_counter() - t0
            entry["seconds"] = 0.0 if cfg.deterministic else round(dt, 4)
            manifest["frames"].append(entry)

        gt_csv = seq / "trajectories.csv"
        if gt_csv.exists():
            trajectories = load_trajectories(gt_csv, len(indices))
            if trajectories:
                report = reprojection_error(snapshots, trajectories,
                                            meta.intrinsics,
                                            labels=label_maps, cfg=cfg.eval)
                write_metrics(out / "metrics.json", report)
                manifest["metrics"] = report
    finally:
        # keep partial results inspectable after an aborted run
        total = time.perf_counter() - t_run
        manifest["total_seconds"] = (0.0 if cfg.deterministic
                                     else round(total, 4))
        (out / "params.log").write_text("\n".join(params_lines) + "\n")
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if cloud is not None:
            save_surfel_ply(out / "model" / "final.ply", cloud)
    return manifest


def run_synth(cfg: PipelineConfig) -> Path:
    """Generate and write the configured synthetic sequence."""
    seq = generate_synthetic(cfg.synth, cfg.seed)
    out = Path(cfg.out)
    write_sequence(seq, out)
    return out


def run_eval(run_dir, gt_path, cfg: PipelineConfig | None = None) -> dict:
    """Re-score a finished run directory against ground truth.

    gt_path is the sequence directory (uses its trajectories.csv and
    label maps) or a trajectory CSV directly (then its parent is taken
    as the sequence directory).
    """
    cfg = cfg or PipelineConfig()
    run_dir = Path(run_dir)
    gt_path = Path(gt_path)
    seq = gt_path.parent if gt_path.is_file() else gt_path
    csv_path = gt_path if gt_path.is_file() else gt_path / "trajectories.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no ground truth at {csv_path}")

    snap_files = sorted((run_dir / "snapshots").glob("*.npz"))
    if not snap_files:
        raise FileNotFoundError(f"no model snapshots under {run_dir}")
    snapshots = [np.load(p) for p in snap_files]

    trajectories = load_trajectories(csv_path, len(snapshots))
    if not trajectories:
        raise ValueError(f"no ground truth rows in {csv_path}")

    label_maps = None
    if (seq / "meta.json").exists():
        meta = load_meta(seq)
        label_maps = [load_frame(seq, i, meta).labels
                      for i in range(len(snapshots))
                      if all(p.exists() for p in frame_paths(seq, i))]
        K = meta.intrinsics
    else:
        raise FileNotFoundError(f"no meta.json next to {csv_path}")

    report = reprojection_error(snapshots, trajectories, K,
                                labels=label_maps, cfg=cfg.eval)
    write_metrics(run_dir / "metrics.json", report)
    return report
