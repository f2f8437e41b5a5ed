"""Model maintenance between solves: initialization, fusion, and growth.

Per frame the pipeline solves for a deformation, commits it into the
surfels and graph, folds the frame's observations into the model
(fuse_frame), and grows the graph where new geometry appeared
(extend_graph). Deterministic merge order: observed pixels are visited
row-major and each surfel is fused at most once per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .frames import Frame, ObservationMaps
from .kinematics import (DeformationState, transform_normals,
                         transform_points, transformed_node_positions)
from .model import EDGraph, SurfelCloud, grid_graph_topology, skinning_weights


@dataclass
class FusionConfig:
    surfel_stride: int = 1      # pixel stride for surfel creation and fusion
    r_min_m: float = 0.001
    r_max_m: float = 0.02
    target_edge_m: float = 0.005
    merge_px: float = 1.0
    merge_depth_m: float = 0.01
    merge_angle_deg: float = 30.0
    stale_frames: int = 10
    conf_stable: float = 10.0
    node_add_radius_m: float | None = None  # None: use target_edge_m
    skin_k: int = 4
    class_skinning: bool = False  # anchor surfels only to same-class nodes

    def __post_init__(self):
        if self.surfel_stride < 1:
            raise ValueError("surfel_stride must be >= 1")
        if not (0 < self.r_min_m <= self.r_max_m):
            raise ValueError("need 0 < r_min_m <= r_max_m")
        if min(self.target_edge_m, self.merge_px, self.merge_depth_m,
               self.merge_angle_deg) <= 0:
            raise ValueError("fusion thresholds must be positive")
        if self.skin_k < 1:
            raise ValueError("skin_k must be >= 1")

    @property
    def node_add_radius(self) -> float:
        if self.node_add_radius_m is not None:
            return self.node_add_radius_m
        return self.target_edge_m


@dataclass
class FuseStats:
    new_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_fused: int = 0
    n_deleted: int = 0


def _surfel_radii(points: np.ndarray, normals: np.ndarray, fx: float,
                  cfg: FusionConfig) -> np.ndarray:
    # pixel-footprint disk: r = z sqrt(2) / (fx |n_z|), grazing views clipped
    nz = np.maximum(np.abs(normals[:, 2]), 1e-6)
    r = points[:, 2] * math.sqrt(2.0) / (fx * nz)
    return np.clip(r, cfg.r_min_m, cfg.r_max_m)


def _strided_valid_pixels(maps: ObservationMaps, stride: int):
    vs, us = np.nonzero(maps.valid)
    keep = (vs % stride == 0) & (us % stride == 0)
    return vs[keep], us[keep]


def init_surfels(frame: Frame, maps: ObservationMaps,
                 cfg: FusionConfig) -> SurfelCloud:
    """One surfel per (strided) valid pixel of the first frame."""
    vs, us = _strided_valid_pixels(maps, cfg.surfel_stride)
    if len(vs) == 0:
        raise ValueError("no valid pixels")
    p = maps.points[vs, us]
    n = maps.normals[vs, us]
    sem = frame.sem_probs[vs, us]
    return SurfelCloud(
        positions=p, normals=n, colors=frame.rgb[vs, us],
        radii=_surfel_radii(p, n, frame.intrinsics.fx, cfg),
        confidences=np.ones(len(vs)),
        timestamps=np.full(len(vs), frame.index, dtype=np.int64),
        sem_scores=sem, labels=np.argmax(sem, axis=1))


def init_ed_graph(frame: Frame, maps: ObservationMaps,
                  cfg: FusionConfig) -> EDGraph:
    """Grid-sampled node mesh with stride chosen from the target edge length.

    Neighboring pixels at depth z are about z/f meters apart, so the
    stride target_edge * f / mean_depth makes the mean 3D edge length
    land near target_edge_m.
    """
    if not maps.valid.any():
        raise ValueError("insufficient graph: no valid pixels")
    z_mean = float(maps.points[..., 2][maps.valid].mean())
    f_mean = 0.5 * (frame.intrinsics.fx + frame.intrinsics.fy)
    stride = max(1, int(round(cfg.target_edge_m * f_mean / z_mean)))

    h, w = maps.valid.shape
    gv = np.arange(0, h, stride)
    gu = np.arange(0, w, stride)
    vv, uu = np.meshgrid(gv, gu, indexing="ij")
    ok = maps.valid[vv, uu]
    count = int(ok.sum())
    if count < 4:
        raise ValueError(f"insufficient graph: {count} valid nodes")
    index_grid = np.full(ok.shape, -1, dtype=np.int64)
    index_grid[ok] = np.arange(count)
    edges, triangles = grid_graph_topology(index_grid)
    node_pos = maps.points[vv[ok], uu[ok]]
    labels = frame.labels[vv[ok], uu[ok]]
    return EDGraph(node_pos, edges, triangles, labels=labels)


def refresh_skinning(cloud: SurfelCloud, graph: EDGraph, cfg: FusionConfig):
    """(skin_idx, skin_w) for every surfel against the current graph."""
    allowed = None
    if cfg.class_skinning:
        allowed = graph.labels[None, :] == cloud.labels[:, None]
    return skinning_weights(cloud.positions, graph.positions, cfg.skin_k,
                            allowed_mask=allowed)


def commit(state: DeformationState, cloud: SurfelCloud, graph: EDGraph,
           skin_idx: np.ndarray, skin_w: np.ndarray) -> None:
    """Apply a solved deformation permanently, in place.

    Surfels move by the blended transform, nodes by their own transform,
    and rest areas are re-measured so the next frame's area term
    regularizes only that frame's increment.
    """
    new_p = transform_points(cloud.positions, state, skin_idx, skin_w,
                             graph.positions)
    new_n = transform_normals(cloud.normals, state, skin_idx, skin_w)
    cloud.positions = new_p
    cloud.normals = new_n
    graph.positions = transformed_node_positions(state, graph.positions)
    graph.refresh_rest_areas()


def fuse_frame(cloud: SurfelCloud, frame: Frame, maps: ObservationMaps,
               cfg: FusionConfig) -> FuseStats:
    """Fold one frame's observations into the committed model, in place.

    Row-major over (strided) valid pixels: fuse into the nearest
    projecting surfel that agrees in position, depth, and normal, else
    append a new surfel. Surfels that have gone unobserved for
    stale_frames without reaching conf_stable are dropped at the end.
    """
    cam = frame.intrinsics
    h, w = maps.valid.shape

    # bucket surfels by rounded projected pixel; merge_px <= 1 keeps every
    # candidate within the 3x3 neighborhood of its bucket
    z = cloud.positions[:, 2]
    front = z > 1e-6
    uv = np.full((len(cloud), 2), -1e9)
    uv[front, 0] = cam.fx * cloud.positions[front, 0] / z[front] + cam.cx
    uv[front, 1] = cam.fy * cloud.positions[front, 1] / z[front] + cam.cy
    buckets: dict[tuple[int, int], list[int]] = {}
    cu = np.round(uv[:, 0]).astype(np.int64)
    cv = np.round(uv[:, 1]).astype(np.int64)
    inb = front & (cu >= -1) & (cu <= w) & (cv >= -1) & (cv <= h)
    for i in np.nonzero(inb)[0]:
        buckets.setdefault((int(cv[i]), int(cu[i])), []).append(int(i))

    cos_gate = math.cos(math.radians(cfg.merge_angle_deg))
    fused = np.zeros(len(cloud), dtype=bool)
    n_fused = 0
    new_rows = {k: [] for k in ("p", "n", "c", "sem")}

    vs, us = _strided_valid_pixels(maps, cfg.surfel_stride)
    for sv, su in zip(vs.tolist(), us.tolist()):
        obs_p = maps.points[sv, su]
        obs_n = maps.normals[sv, su]
        best = -1
        best_d = np.inf
        for dv in (-1, 0, 1):
            for du in (-1, 0, 1):
                for i in buckets.get((sv + dv, su + du), ()):
                    if fused[i]:
                        continue
                    d = math.hypot(uv[i, 0] - su, uv[i, 1] - sv)
                    if d > cfg.merge_px or d >= best_d:
                        continue
                    if abs(z[i] - obs_p[2]) >= cfg.merge_depth_m:
                        continue
                    if float(cloud.normals[i] @ obs_n) < cos_gate:
                        continue
                    best, best_d = i, d
        if best >= 0:
            fused[best] = True
            n_fused += 1
            c = cloud.confidences[best]
            cloud.positions[best] = (c * cloud.positions[best] + obs_p) / (c + 1)
            blend = c * cloud.normals[best] + obs_n
            cloud.normals[best] = blend / np.linalg.norm(blend)
            cloud.colors[best] = (c * cloud.colors[best] + frame.rgb[sv, su]) / (c + 1)
            s = (c * cloud.sem_scores[best] + frame.sem_probs[sv, su]) / (c + 1)
            cloud.sem_scores[best] = s / s.sum()
            cloud.labels[best] = int(np.argmax(cloud.sem_scores[best]))
            cloud.confidences[best] = c + 1
            cloud.timestamps[best] = frame.index
        else:
            new_rows["p"].append(obs_p)
            new_rows["n"].append(obs_n)
            new_rows["c"].append(frame.rgb[sv, su])
            new_rows["sem"].append(frame.sem_probs[sv, su])

    new_ids = np.zeros(0, dtype=np.int64)
    if new_rows["p"]:
        p = np.asarray(new_rows["p"])
        n = np.asarray(new_rows["n"])
        sem = np.asarray(new_rows["sem"])
        new_ids = cloud.append(
            p, n, np.asarray(new_rows["c"]),
            _surfel_radii(p, n, cam.fx, cfg),
            np.ones(len(p)), np.full(len(p), frame.index, dtype=np.int64),
            sem, np.argmax(sem, axis=1))

    stale = ((frame.index - cloud.timestamps >= cfg.stale_frames)
             & (cloud.confidences < cfg.conf_stable))
    n_deleted = int(stale.sum())
    if n_deleted:
        cloud.keep(~stale)
    return FuseStats(new_ids=new_ids, n_fused=n_fused, n_deleted=n_deleted)


def extend_graph(graph: EDGraph, cloud: SurfelCloud, new_ids: np.ndarray,
                 cfg: FusionConfig):
    """Spawn nodes for new surfels in uncovered space; re-anchor surfels.

    New surfels are visited in creation order; each one farther than
    node_add_radius from every node (including nodes spawned earlier in
    the same pass) becomes a node connected to its 8 nearest
    already-present nodes. Returns (graph, skin_idx, skin_w) with the
    skinning recomputed against the final graph, which also re-indexes
    surfels removed by deletion.
    """
    added_pos: list[np.ndarray] = []
    added_labels: list[int] = []
    new_edges: list[tuple[int, int]] = []
    if len(new_ids):
        rows = np.nonzero(np.isin(cloud.ids, new_ids))[0]
        tree = cKDTree(graph.positions)
        n0 = graph.n_nodes
        radius = cfg.node_add_radius
        for r in rows:
            p = cloud.positions[r]
            d = float(tree.query(p)[0])
            for q in added_pos:
                d = min(d, float(np.linalg.norm(p - q)))
            if d <= radius:
                continue
            all_pos = (np.vstack([graph.positions] + [q[None] for q in added_pos])
                       if added_pos else graph.positions)
            order = np.argsort(np.linalg.norm(all_pos - p, axis=1))
            new_idx = n0 + len(added_pos)
            for j in order[:8]:
                new_edges.append((new_idx, int(j)))
                new_edges.append((int(j), new_idx))
            added_pos.append(p.copy())
            added_labels.append(int(cloud.labels[r]))

    if added_pos:
        positions = np.vstack([graph.positions, np.asarray(added_pos)])
        edges = np.vstack([graph.edges,
                           np.asarray(new_edges, dtype=np.int64)])
        labels = np.concatenate([graph.labels,
                                 np.asarray(added_labels, dtype=np.int64)])
        graph = EDGraph(positions, edges, graph.triangles,
                        rest_areas=graph.rest_areas, labels=labels)

    skin_idx, skin_w = refresh_skinning(cloud, graph, cfg)
    return graph, skin_idx, skin_w
