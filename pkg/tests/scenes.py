"""Shared synthetic mini-scenes for loss and optimizer tests.

A smooth bump surface defined directly in image space (z as a function of
pixel), textured RGB, and a two-class left/right segmentation. Small
enough that finite-difference sweeps stay fast.
"""

import numpy as np

from surfeltrack.boundary import SemanticBoundaryField
from surfeltrack.camera import CameraIntrinsics
from surfeltrack.frames import Frame, observation_maps
from surfeltrack.kinematics import DeformationState
from surfeltrack.model import EDGraph, grid_graph_topology, skinning_weights

K = CameraIntrinsics(fx=80.0, fy=80.0, cx=20.0, cy=15.0, width=40, height=30)


def bump_depth(K, amp=0.0, center=(20.0, 15.0), sigma_px=8.0, z0=0.8):
    us, vs = np.meshgrid(np.arange(K.width, dtype=float),
                         np.arange(K.height, dtype=float))
    r2 = (us - center[0]) ** 2 + (vs - center[1]) ** 2
    return z0 - amp * np.exp(-0.5 * r2 / sigma_px ** 2)


def textured_rgb(K, seed=0):
    us, vs = np.meshgrid(np.arange(K.width, dtype=float),
                         np.arange(K.height, dtype=float))
    rng = np.random.default_rng(seed)
    base = 0.5 + 0.25 * np.sin(us / 2.3) * np.cos(vs / 1.9)
    rgb = np.stack([base, 0.5 + 0.2 * np.sin(us / 3.1 + 1),
                    0.5 + 0.2 * np.cos(vs / 2.7)], axis=2)
    return np.clip(rgb + 0.02 * rng.standard_normal(rgb.shape), 0, 1)


def split_sem(K, col=20, hi=0.9):
    sem = np.zeros((K.height, K.width, 2))
    sem[:, :col, 0], sem[:, :col, 1] = hi, 1 - hi
    sem[:, col:, 0], sem[:, col:, 1] = 1 - hi, hi
    return sem


def make_frame(K, amp=0.0, seed=0):
    return Frame(0, textured_rgb(K, seed), bump_depth(K, amp),
                 split_sem(K), K)


def build_scene(seed=0, amp0=0.0, amp1=0.004, stride=4, k=4, n_nodes_side=3):
    """Surfels from the amp0 surface, observed frame at amp1."""
    frame0 = make_frame(K, amp0, seed)
    maps0 = observation_maps(frame0)
    frame1 = make_frame(K, amp1, seed)
    maps1 = observation_maps(frame1)

    vs, us = np.nonzero(maps0.valid)
    keep = (vs % stride == 1) & (us % stride == 1)
    vs, us = vs[keep], us[keep]
    positions = maps0.points[vs, us]
    normals = maps0.normals[vs, us]
    sem = frame0.sem_probs[vs, us]
    labels = np.argmax(sem, axis=1)
    colors = frame0.rgb[vs, us]
    radii = np.full(len(positions), 0.012)

    gu = np.linspace(4, K.width - 5, n_nodes_side)
    gv = np.linspace(4, K.height - 5, n_nodes_side)
    guu, gvv = np.meshgrid(gu, gv)
    gz = bump_depth(K, amp0)[gvv.astype(int), guu.astype(int)]
    node_pos = np.stack([(guu.ravel() - K.cx) * gz.ravel() / K.fx,
                         (gvv.ravel() - K.cy) * gz.ravel() / K.fy,
                         gz.ravel()], axis=1)
    grid = np.arange(n_nodes_side ** 2).reshape(n_nodes_side, n_nodes_side)
    edges, triangles = grid_graph_topology(grid)
    graph = EDGraph(node_pos, edges, triangles)

    skin_idx, skin_w = skinning_weights(positions, node_pos, k)
    field = SemanticBoundaryField(frame1.sem_probs)
    return {
        "positions": positions, "normals": normals, "sem": sem,
        "labels": labels, "colors": colors, "radii": radii,
        "graph": graph, "skin_idx": skin_idx, "skin_w": skin_w,
        "frame0": frame0, "maps0": maps0, "frame1": frame1, "maps1": maps1,
        "field": field, "K": K,
    }


def noisy_state(n_nodes, seed, q_scale=0.03, t_scale=0.004):
    rng = np.random.default_rng(seed)
    state = DeformationState.identity(n_nodes)
    state.node_quats += rng.normal(scale=q_scale, size=(n_nodes, 4))
    state.node_trans += rng.normal(scale=t_scale, size=(n_nodes, 3))
    state.global_quat += rng.normal(scale=q_scale, size=4)
    state.global_trans += rng.normal(scale=t_scale, size=3)
    return state


def world_texture(X, Y):
    """Texture anchored to surface coordinates, so it travels with motion."""
    return np.clip(np.stack([
        0.5 + 0.25 * np.sin(125 * X) * np.cos(110 * Y),
        0.5 + 0.2 * np.sin(95 * X + 1.0) + 0.05 * np.sin(240 * Y),
        0.5 + 0.2 * np.cos(105 * Y) + 0.05 * np.cos(260 * X)], axis=-1),
        0, 1)


def plane_frame(index, z, shift=(0.0, 0.0)):
    """Fronto-parallel plane at depth z, translated by (shift_x, shift_y).

    Texture and the left/right class split are functions of the surface
    point, so frames at different z/shift depict one rigidly moving plane.
    """
    us, vs = np.meshgrid(np.arange(K.width, dtype=float),
                         np.arange(K.height, dtype=float))
    X = (us - K.cx) * z / K.fx - shift[0]
    Y = (vs - K.cy) * z / K.fy - shift[1]
    rgb = world_texture(X, Y)
    sem = np.zeros((K.height, K.width, 2))
    left = X < 0.0
    sem[..., 0] = np.where(left, 0.9, 0.1)
    sem[..., 1] = np.where(left, 0.1, 0.9)
    depth = np.full((K.height, K.width), z)
    return Frame(index, rgb, depth, sem, K)


def rigid_plane_scene(z0=0.8, dz=0.005, shift=(0.0, 0.0), stride=4, k=4,
                      n_nodes_side=3):
    """Plane observed at z0, then rigidly moved to z0+dz plus lateral shift."""
    frame0 = plane_frame(0, z0)
    maps0 = observation_maps(frame0)
    frame1 = plane_frame(1, z0 + dz, shift)
    maps1 = observation_maps(frame1)

    vs, us = np.nonzero(maps0.valid)
    keep = (vs % stride == 1) & (us % stride == 1)
    vs, us = vs[keep], us[keep]
    positions = maps0.points[vs, us]
    normals = maps0.normals[vs, us]
    sem = frame0.sem_probs[vs, us]
    labels = np.argmax(sem, axis=1)
    colors = frame0.rgb[vs, us]
    radii = np.full(len(positions), 0.012)

    gu = np.linspace(4, K.width - 5, n_nodes_side)
    gv = np.linspace(4, K.height - 5, n_nodes_side)
    guu, gvv = np.meshgrid(gu, gv)
    node_pos = np.stack([(guu.ravel() - K.cx) * z0 / K.fx,
                         (gvv.ravel() - K.cy) * z0 / K.fy,
                         np.full(n_nodes_side ** 2, z0)], axis=1)
    grid = np.arange(n_nodes_side ** 2).reshape(n_nodes_side, n_nodes_side)
    edges, triangles = grid_graph_topology(grid)
    graph = EDGraph(node_pos, edges, triangles)
    skin_idx, skin_w = skinning_weights(positions, node_pos, k)
    field = SemanticBoundaryField(frame1.sem_probs)
    truth = positions + np.array([shift[0], shift[1], dz])
    return {
        "positions": positions, "normals": normals, "sem": sem,
        "labels": labels, "colors": colors, "radii": radii,
        "graph": graph, "skin_idx": skin_idx, "skin_w": skin_w,
        "frame0": frame0, "maps0": maps0, "frame1": frame1, "maps1": maps1,
        "field": field, "K": K, "truth": truth,
    }
