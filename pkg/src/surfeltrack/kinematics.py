"""Embedded-deformation kinematics.

A sparse graph of nodes carries per-node quaternion + translation
parameters plus one global rigid transform. Surfels are moved by blending
their k nearest nodes' transforms with normalized exponential weights:

    p~ = R_g ( sum_j w_j [ R(q_j) (p - g_j) + g_j + b_j ] ) + t_g
    n~ = normalize( R_g sum_j w_j R(q_j) n )

Quaternions are stored (w, x, y, z) and need not be unit: rotations are
built from the quadratic form divided by |q|^2, so they stay well-defined
while the optimizer moves raw coefficients. All gradient helpers here are
exact derivatives of these expressions.
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly non-unit) quaternions.

    q: (..., 4) as (w, x, y, z). Returns (..., 3, 3). Uses the standard
    quadratic form divided by |q|^2.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    n2 = w * w + x * x + y * y + z * z
    if np.any(n2 < 1e-24):
        raise ValueError("zero quaternion has no rotation")
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = w * w + x * x - y * y - z * z
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = w * w - x * x + y * y - z * z
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = w * w - x * x - y * y + z * z
    return R / n2[..., None, None]


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotate_vec_quat_jacobian(q: np.ndarray, v: np.ndarray,
                             a: np.ndarray) -> np.ndarray:
    """Adjoint of rotation wrt quaternion: d(a . R(q) v)/dq.

    q: (..., 4), v: (..., 3), a: (..., 3); broadcasts. Returns (..., 4).

    Uses  S(q) v = (w^2 - |u|^2) v + 2 (u.v) u + 2 w (u x v)  with
    u = (x, y, z), and R = S / |q|^2.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    w = q[..., 0]
    u = q[..., 1:]
    n2 = np.sum(q * q, axis=-1)
    av = np.sum(a * v, axis=-1)
    au = np.sum(a * u, axis=-1)
    uv = np.sum(u * v, axis=-1)
    uxv = np.cross(u, v)
    vxa = np.cross(v, a)
    a_uxv = np.sum(a * uxv, axis=-1)
    # d(a.Sv)/dw and d(a.Sv)/du
    dw = 2 * w * av + 2 * a_uxv
    du = (-2 * av[..., None] * u + 2 * au[..., None] * v
          + 2 * uv[..., None] * a + 2 * w[..., None] * vxa)
    dS = np.concatenate([dw[..., None], du], axis=-1)
    # a.Rv for the normalization correction: R = S/n2 => dR = (dS - 2 q R)/n2
    Rv = np.einsum("...ij,...j->...i", quat_to_rotation(q), v)
    aRv = np.sum(a * Rv, axis=-1)
    return (dS - 2 * q * aRv[..., None]) / n2[..., None]


def param_vector_size(n_nodes: int) -> int:
    return 7 * (n_nodes + 1)


class DeformationState:
    """The 7*(n+1) optimization variables: per-node (q, b) plus a global
    quaternion + translation."""

    __slots__ = ("node_quats", "node_trans", "global_quat", "global_trans")

    def __init__(self, node_quats: np.ndarray, node_trans: np.ndarray,
                 global_quat: np.ndarray, global_trans: np.ndarray):
        self.node_quats = np.asarray(node_quats, dtype=float)
        self.node_trans = np.asarray(node_trans, dtype=float)
        self.global_quat = np.asarray(global_quat, dtype=float)
        self.global_trans = np.asarray(global_trans, dtype=float)
        n = self.node_quats.shape[0]
        if self.node_quats.shape != (n, 4) or self.node_trans.shape != (n, 3):
            raise ValueError("inconsistent per-node parameter shapes")
        if self.global_quat.shape != (4,) or self.global_trans.shape != (3,):
            raise ValueError("global transform must be quaternion + translation")

    @classmethod
    def identity(cls, n_nodes: int) -> "DeformationState":
        q = np.tile(IDENTITY_QUAT, (n_nodes, 1))
        return cls(q, np.zeros((n_nodes, 3)), IDENTITY_QUAT.copy(), np.zeros(3))

    @property
    def n_nodes(self) -> int:
        return self.node_quats.shape[0]

    @property
    def size(self) -> int:
        return param_vector_size(self.n_nodes)

    def copy(self) -> "DeformationState":
        return DeformationState(self.node_quats.copy(), self.node_trans.copy(),
                                self.global_quat.copy(), self.global_trans.copy())

    def to_vector(self) -> np.ndarray:
        """Flat layout: [q_0, b_0, ..., q_{n-1}, b_{n-1}, q_g, t_g]."""
        per_node = np.concatenate([self.node_quats, self.node_trans], axis=1)
        return np.concatenate([per_node.ravel(), self.global_quat, self.global_trans])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_nodes: int) -> "DeformationState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (param_vector_size(n_nodes),):
            raise ValueError("parameter vector has wrong length")
        per_node = vec[: 7 * n_nodes].reshape(n_nodes, 7)
        return cls(per_node[:, :4].copy(), per_node[:, 4:].copy(),
                   vec[7 * n_nodes: 7 * n_nodes + 4].copy(), vec[7 * n_nodes + 4:].copy())

    def grow(self, n_new_nodes: int) -> "DeformationState":
        """Append identity transforms for freshly added graph nodes."""
        if n_new_nodes <= 0:
            return self.copy()
        q = np.vstack([self.node_quats, np.tile(IDENTITY_QUAT, (n_new_nodes, 1))])
        b = np.vstack([self.node_trans, np.zeros((n_new_nodes, 3))])
        return DeformationState(q, b, self.global_quat.copy(), self.global_trans.copy())


def transform_points(points: np.ndarray, state: DeformationState,
                     skin_idx: np.ndarray, skin_w: np.ndarray,
                     node_pos: np.ndarray) -> np.ndarray:
    """Apply the blended deformation to (N, 3) points: each anchor node
    rotates the point about its own rest position and translates it, the
    results are blended by the skinning weights, then the global
    transform is applied on top.

    skin_idx/skin_w: (N, k) anchor node indices and simplex weights.
    node_pos: (n, 3) node rest positions.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    Rn = quat_to_rotation(state.node_quats)          # (n,3,3)
    g = node_pos[skin_idx]                           # (N,k,3)
    local = points[:, None, :] - g                   # (N,k,3)
    rotated = np.einsum("nkij,nkj->nki", Rn[skin_idx], local)
    moved = rotated + g + state.node_trans[skin_idx]
    blended = np.einsum("nk,nki->ni", skin_w, moved)
    Rg = quat_to_rotation(state.global_quat)
    return blended @ Rg.T + state.global_trans


def transform_points_and_blend(points, state, skin_idx, skin_w, node_pos):
    """Like transform_points but also returns the pre-global blend, which
    the global-rotation gradient needs."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    Rn = quat_to_rotation(state.node_quats)
    g = node_pos[skin_idx]
    local = points[:, None, :] - g
    rotated = np.einsum("nkij,nkj->nki", Rn[skin_idx], local)
    moved = rotated + g + state.node_trans[skin_idx]
    blended = np.einsum("nk,nki->ni", skin_w, moved)
    Rg = quat_to_rotation(state.global_quat)
    return blended @ Rg.T + state.global_trans, blended


def transform_normals(normals: np.ndarray, state: DeformationState,
                      skin_idx: np.ndarray, skin_w: np.ndarray) -> np.ndarray:
    """Rotate unit normals by the blended node rotations, then renormalize.

    Raises ValueError if any blended normal nearly cancels out.
    """
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    Rn = quat_to_rotation(state.node_quats)
    rotated = np.einsum("nkij,nj->nki", Rn[skin_idx], normals)
    blended = np.einsum("nk,nki->ni", skin_w, rotated)
    Rg = quat_to_rotation(state.global_quat)
    out = blended @ Rg.T
    norms = np.linalg.norm(out, axis=1)
    if np.any(norms < 1e-8):
        raise ValueError("degenerate normal blend")
    return out / norms[:, None]


def accumulate_point_gradient(grad: np.ndarray, adjoints: np.ndarray,
                              points: np.ndarray, blended: np.ndarray,
                              state: DeformationState,
                              skin_idx: np.ndarray, skin_w: np.ndarray,
                              node_pos: np.ndarray) -> None:
    """Accumulate dL/dtheta given per-point adjoints a_i = dL/dp~_i.

    grad: flat (7*(n+1),) vector, modified in place. blended is the
    pre-global blend from transform_points_and_blend; points are the rest
    positions the transform was applied to.
    """
    n = state.n_nodes
    adjoints = np.atleast_2d(np.asarray(adjoints, dtype=float))
    Rg = quat_to_rotation(state.global_quat)
    # global translation: sum of adjoints
    grad[7 * n + 4:] += adjoints.sum(axis=0)
    # global quaternion: sum_i d(a_i . R_g u_i)/dq_g
    grad[7 * n: 7 * n + 4] += rotate_vec_quat_jacobian(
        state.global_quat, blended, adjoints).sum(axis=0)
    # node terms share the back-rotated adjoint R_g^T a_i
    back = adjoints @ Rg                              # (N,3)
    wa = skin_w[:, :, None] * back[:, None, :]        # (N,k,3)
    k = skin_idx.shape[1]
    flat_idx = skin_idx.ravel()
    # translations: dL/db_j = sum_i w_ij R_g^T a_i
    for axis in range(3):
        contrib = np.bincount(flat_idx, weights=wa[:, :, axis].ravel(), minlength=n)
        grad[axis + 4: 7 * n: 7] += contrib
    # quaternions: dL/dq_j = sum_i w_ij d(a~ . R(q_j) (p_i - g_j))/dq_j
    local = np.atleast_2d(points)[:, None, :] - node_pos[skin_idx]
    qj = state.node_quats[skin_idx]                   # (N,k,4)
    jq = rotate_vec_quat_jacobian(qj, local, np.broadcast_to(back[:, None, :],
                                                             local.shape))
    jq = jq * skin_w[:, :, None]
    for comp in range(4):
        contrib = np.bincount(flat_idx, weights=jq[:, :, comp].ravel(), minlength=n)
        grad[comp: 7 * n: 7] += contrib


def transformed_node_positions(state: DeformationState,
                               node_pos: np.ndarray) -> np.ndarray:
    """Node positions after their own transforms and the global one.

    A node sits at its own rotation center, so only b_j and the global
    transform move it: g~_j = R_g (g_j + b_j) + t_g.
    """
    Rg = quat_to_rotation(state.global_quat)
    return (node_pos + state.node_trans) @ Rg.T + state.global_trans


def accumulate_node_gradient(grad: np.ndarray, adjoints: np.ndarray,
                             state: DeformationState,
                             node_pos: np.ndarray) -> None:
    """Accumulate dL/dtheta given per-node adjoints dL/dg~_j (all nodes)."""
    n = state.n_nodes
    Rg = quat_to_rotation(state.global_quat)
    moved = node_pos + state.node_trans
    grad[7 * n + 4:] += adjoints.sum(axis=0)
    grad[7 * n: 7 * n + 4] += rotate_vec_quat_jacobian(
        state.global_quat, moved, adjoints).sum(axis=0)
    back = adjoints @ Rg
    for axis in range(3):
        grad[axis + 4: 7 * n: 7] += back[:, axis]
