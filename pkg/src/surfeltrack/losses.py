"""The per-frame registration objective and its exact gradient.

    total = lambda_s (L_icp + L_render) + lambda_m L_morph
            + lambda_r (L_face + L_rot)

All terms are mean-normalized (by association / surfel / triangle / node
count) so the default weights transfer across scene sizes.

Gradients follow a block-coordinate convention: data associations, the
morphing targets (nearest own-class boundary pixels), and the renderer's
frozen quantities are built once per solve epoch and held fixed inside
every objective/gradient evaluation; the optimizer refreshes them between
epochs. Under that convention each term is smooth in the parameters and
the analytic gradient below is exact.

The point losses share one kinematic chain: each contributes a per-surfel
adjoint dL/dp~ and a single pass maps the summed adjoints to parameter
space.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .association import AssociationSet, associate
from .boundary import SemanticBoundaryField
from .camera import CameraIntrinsics, projection_jacobian
from .frames import Frame, ObservationMaps
from .kinematics import (DeformationState, accumulate_node_gradient,
                         accumulate_point_gradient, transform_points_and_blend,
                         transformed_node_positions)
from .renderer import (RenderConfig, RenderLossContext, build_render_context,
                       context_render_loss, context_render_loss_grad)

MIN_Z = 1e-6


@dataclass
class LossWeights:
    lambda_s: float = 1.0
    lambda_m: float = 10.0
    lambda_r: float = 10.0
    enable_icp: bool = True
    enable_render: bool = True
    enable_morph: bool = True
    semantic_mode: str = "soft"  # "soft" | "hard" | "off"
    # point-to-plane residuals enter the total in units of this length, so
    # the geometric and photometric similarity terms share a scale
    icp_scale_m: float = 0.01

    def __post_init__(self):
        if not (self.enable_icp or self.enable_render):
            raise ValueError("at least one similarity term must be enabled")
        if min(self.lambda_s, self.lambda_m, self.lambda_r) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.icp_scale_m <= 0:
            raise ValueError("icp_scale_m must be positive")
        if self.semantic_mode not in ("soft", "hard", "off"):
            raise ValueError(f"unknown semantic mode: {self.semantic_mode!r}")


@dataclass
class MorphContext:
    """Frozen outside-region surfels and their boundary pull targets."""
    outside_idx: np.ndarray  # (M,) indices into the surfel arrays
    targets: np.ndarray      # (M,2) boundary pixel (u,v) per outside surfel
    n_surfels: int


@dataclass
class SolveContext:
    """Everything one solve epoch needs: fixed frame-scene geometry plus
    the frozen per-epoch association/target/render state."""
    positions: np.ndarray    # (N,3) surfel rest positions
    normals: np.ndarray      # (N,3)
    sem_scores: np.ndarray   # (N,C)
    labels: np.ndarray       # (N,)
    colors: np.ndarray       # (N,3)
    radii: np.ndarray        # (N,)
    skin_idx: np.ndarray
    skin_w: np.ndarray
    node_pos: np.ndarray     # (n,3)
    triangles: np.ndarray    # (T,3)
    rest_areas: np.ndarray   # (T,)
    K: CameraIntrinsics
    weights: LossWeights
    assoc: AssociationSet | None = None
    morph: MorphContext | None = None
    render: RenderLossContext | None = None
    parts: dict = dc_field(default_factory=dict)


def build_morph_context(positions_t, labels, field: SemanticBoundaryField,
                        K: CameraIntrinsics) -> MorphContext:
    """Select surfels projecting outside their own class region and freeze
    their nearest own-boundary pixels. Surfels whose class is absent from
    the frame (or that sit behind the camera) contribute nothing."""
    n = len(positions_t)
    z = positions_t[:, 2]
    front = z > MIN_Z
    uv = np.zeros((n, 2))
    uv[front, 0] = K.fx * positions_t[front, 0] / z[front] + K.cx
    uv[front, 1] = K.fy * positions_t[front, 1] / z[front] + K.cy
    frame_label = np.full(n, -1, dtype=np.int64)
    frame_label[front] = field.label_at(uv[front])
    outside = front & (frame_label != labels) & field.present[labels]
    idx = np.nonzero(outside)[0]
    targets = np.zeros((len(idx), 2))
    for k in np.unique(labels[idx]):
        rows = np.nonzero(labels[idx] == k)[0]
        targets[rows] = field.nearest_boundary(int(k), uv[idx[rows]])
    return MorphContext(outside_idx=idx, targets=targets, n_surfels=n)


def build_solve_context(positions, normals, sem_scores, labels, colors, radii,
                        skin_idx, skin_w, node_pos, triangles, rest_areas,
                        state: DeformationState, frame: Frame,
                        maps: ObservationMaps,
                        boundary_field: SemanticBoundaryField | None,
                        weights: LossWeights,
                        render_cfg: RenderConfig | None = None,
                        dist_thresh: float = 0.05,
                        angle_thresh_deg: float = 45.0,
                        ssim_window: int = 11) -> SolveContext:
    """Freeze associations, morph targets and render reference state at the
    given parameters."""
    ctx = SolveContext(positions=np.asarray(positions, float),
                       normals=np.asarray(normals, float),
                       sem_scores=np.asarray(sem_scores, float),
                       labels=np.asarray(labels, np.int64),
                       colors=np.asarray(colors, float),
                       radii=np.asarray(radii, float),
                       skin_idx=skin_idx, skin_w=skin_w, node_pos=node_pos,
                       triangles=triangles, rest_areas=rest_areas,
                       K=frame.intrinsics, weights=weights)
    if weights.enable_icp:
        ctx.assoc = associate(ctx.positions, ctx.normals, ctx.sem_scores,
                              ctx.labels, state, skin_idx, skin_w, node_pos,
                              maps, frame, semantic_mode=weights.semantic_mode,
                              dist_thresh=dist_thresh,
                              angle_thresh_deg=angle_thresh_deg)
    p_t, _ = transform_points_and_blend(ctx.positions, state, skin_idx,
                                        skin_w, node_pos)
    if weights.enable_morph and boundary_field is not None:
        ctx.morph = build_morph_context(p_t, ctx.labels, boundary_field, frame.intrinsics)
    if weights.enable_render:
        ctx.render = build_render_context(p_t, ctx.colors, ctx.radii,
                                          frame.rgb, frame.intrinsics,
                                          render_cfg, window=ssim_window)
    return ctx


def icp_loss(state: DeformationState, ctx: SolveContext,
             p_t: np.ndarray | None = None) -> float:
    """Mean rho-weighted squared point-to-plane residual over associations."""
    assoc = ctx.assoc
    if assoc is None or len(assoc) == 0:
        raise ValueError("no data association")
    if p_t is None:
        p_t, _ = transform_points_and_blend(ctx.positions, state, ctx.skin_idx,
                                            ctx.skin_w, ctx.node_pos)
    r = np.sum(assoc.obs_normals * (p_t[assoc.indices] - assoc.obs_points), axis=1)
    return float(np.sum(assoc.rho * r * r) / len(assoc))


def morphing_loss(state: DeformationState, ctx: SolveContext,
                  p_t: np.ndarray | None = None) -> float:
    """Mean squared pixel distance of outside-region surfels to their frozen
    nearest own-class boundary pixel; inside surfels contribute 0."""
    m = ctx.morph
    if m is None or len(m.outside_idx) == 0:
        return 0.0
    if p_t is None:
        p_t, _ = transform_points_and_blend(ctx.positions, state, ctx.skin_idx,
                                            ctx.skin_w, ctx.node_pos)
    pts = p_t[m.outside_idx]
    z = np.maximum(pts[:, 2], MIN_Z)
    uv = np.stack([ctx.K.fx * pts[:, 0] / z + ctx.K.cx,
                   ctx.K.fy * pts[:, 1] / z + ctx.K.cy], axis=1)
    d2 = np.sum((uv - m.targets) ** 2, axis=1)
    return float(d2.sum() / m.n_surfels)


def face_loss(state: DeformationState, ctx: SolveContext) -> float:
    """Mean squared triangle-area change of the deformed graph."""
    if len(ctx.triangles) == 0:
        return 0.0
    g = transformed_node_positions(state, ctx.node_pos)
    e1 = g[ctx.triangles[:, 1]] - g[ctx.triangles[:, 0]]
    e2 = g[ctx.triangles[:, 2]] - g[ctx.triangles[:, 0]]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    return float(np.mean((area - ctx.rest_areas) ** 2))


def rot_loss(state: DeformationState) -> float:
    """Mean squared deviation of node quaternion norms from one."""
    if state.n_nodes == 0:
        return 0.0
    n2 = np.sum(state.node_quats ** 2, axis=1)
    return float(np.mean((1.0 - n2) ** 2))


def render_term(state: DeformationState, ctx: SolveContext,
                p_t: np.ndarray | None = None) -> float:
    if ctx.render is None:
        return 0.0
    if p_t is None:
        p_t, _ = transform_points_and_blend(ctx.positions, state, ctx.skin_idx,
                                            ctx.skin_w, ctx.node_pos)
    return context_render_loss(p_t[ctx.render.surfel_sel], ctx.render)


def objective(state: DeformationState, ctx: SolveContext) -> float:
    """Total weighted objective; per-term values are left in ctx.parts."""
    w = ctx.weights
    p_t, _ = transform_points_and_blend(ctx.positions, state, ctx.skin_idx,
                                        ctx.skin_w, ctx.node_pos)
    parts = {}
    total = 0.0
    if w.enable_icp:
        parts["icp"] = icp_loss(state, ctx, p_t) / w.icp_scale_m ** 2
        total += w.lambda_s * parts["icp"]
    if w.enable_render:
        parts["render"] = render_term(state, ctx, p_t)
        total += w.lambda_s * parts["render"]
    if w.enable_morph:
        parts["morph"] = morphing_loss(state, ctx, p_t)
        total += w.lambda_m * parts["morph"]
    parts["face"] = face_loss(state, ctx)
    parts["rot"] = rot_loss(state)
    total += w.lambda_r * (parts["face"] + parts["rot"])
    ctx.parts = parts
    return total


def gradient(state: DeformationState, ctx: SolveContext) -> np.ndarray:
    """Exact gradient of the objective under the frozen-context convention.

    Raises on a non-finite objective.
    """
    w = ctx.weights
    n = state.n_nodes
    grad = np.zeros(state.size)
    p_t, blended = transform_points_and_blend(ctx.positions, state,
                                              ctx.skin_idx, ctx.skin_w,
                                              ctx.node_pos)
    adjoint = np.zeros_like(p_t)
    total = 0.0

    if w.enable_icp:
        assoc = ctx.assoc
        if assoc is None or len(assoc) == 0:
            raise ValueError("no data association")
        r = np.sum(assoc.obs_normals * (p_t[assoc.indices] - assoc.obs_points),
                   axis=1)
        s2 = w.icp_scale_m ** 2
        total += w.lambda_s * float(np.sum(assoc.rho * r * r) / len(assoc)) / s2
        coeff = w.lambda_s * 2.0 * assoc.rho * r / (len(assoc) * s2)
        np.add.at(adjoint, assoc.indices, coeff[:, None] * assoc.obs_normals)

    if w.enable_render and ctx.render is not None:
        val, d_pts = context_render_loss_grad(p_t[ctx.render.surfel_sel],
                                              ctx.render)
        total += w.lambda_s * val
        np.add.at(adjoint, ctx.render.surfel_sel, w.lambda_s * d_pts)

    if w.enable_morph and ctx.morph is not None and len(ctx.morph.outside_idx):
        m = ctx.morph
        pts = p_t[m.outside_idx]
        z = np.maximum(pts[:, 2], MIN_Z)
        uv = np.stack([ctx.K.fx * pts[:, 0] / z + ctx.K.cx,
                       ctx.K.fy * pts[:, 1] / z + ctx.K.cy], axis=1)
        delta = uv - m.targets
        total += w.lambda_m * float(np.sum(delta ** 2) / m.n_surfels)
        d_uv = w.lambda_m * 2.0 * delta / m.n_surfels
        J = projection_jacobian(pts, ctx.K)
        np.add.at(adjoint, m.outside_idx,
                  np.einsum("nk,nki->ni", d_uv, J))

    accumulate_point_gradient(grad, adjoint, ctx.positions, blended, state,
                              ctx.skin_idx, ctx.skin_w, ctx.node_pos)

    # face term: adjoints on transformed node positions
    if len(ctx.triangles):
        g = transformed_node_positions(state, ctx.node_pos)
        i0, i1, i2 = ctx.triangles[:, 0], ctx.triangles[:, 1], ctx.triangles[:, 2]
        e1 = g[i1] - g[i0]
        e2 = g[i2] - g[i0]
        c = np.cross(e1, e2)
        s = np.linalg.norm(c, axis=1)
        area = 0.5 * s
        total += w.lambda_r * float(np.mean((area - ctx.rest_areas) ** 2))
        d_area = w.lambda_r * 2.0 * (area - ctx.rest_areas) / len(ctx.triangles)
        safe = np.where(s > 1e-12, s, 1.0)
        d_c = (d_area * 0.5 / safe)[:, None] * c  # zero where degenerate
        d_e1 = np.cross(e2, d_c)
        d_e2 = np.cross(d_c, e1)
        node_adj = np.zeros_like(ctx.node_pos)
        np.add.at(node_adj, i1, d_e1)
        np.add.at(node_adj, i2, d_e2)
        np.add.at(node_adj, i0, -(d_e1 + d_e2))
        accumulate_node_gradient(grad, node_adj, state, ctx.node_pos)

    # quaternion norm term: direct in the node quaternions
    if n:
        n2 = np.sum(state.node_quats ** 2, axis=1)
        total += w.lambda_r * float(np.mean((1.0 - n2) ** 2))
        d_q = w.lambda_r * (-4.0 * (1.0 - n2))[:, None] * state.node_quats / n
        for comp in range(4):
            grad[comp: 7 * n: 7] += d_q[:, comp]

    if not np.isfinite(total) or not np.all(np.isfinite(grad)):
        raise ValueError("non-finite objective")
    return grad
