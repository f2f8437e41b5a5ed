"""Scene containers: the surfel cloud and the embedded-deformation graph.

Both are stored struct-of-arrays so per-frame math stays vectorized.
Surfels keep a persistent integer id so trajectories can be followed
across fusion, which appends and deletes rows.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

UNIT_TOL = 1e-6


class SurfelCloud:
    """Columnar surfel storage.

    positions (N,3) m, normals (N,3) unit, colors (N,3) in [0,1],
    radii (N,) m, confidences (N,), timestamps (N,) frame indices,
    sem_scores (N,C) rows on the probability simplex, labels (N,)
    = argmax of sem_scores. ids are unique and never reused.
    """

    def __init__(self, positions, normals, colors, radii, confidences,
                 timestamps, sem_scores, labels, ids=None, next_id=None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = self.positions.shape[0]
        self.normals = np.asarray(normals, dtype=float).reshape(n, 3)
        self.colors = np.asarray(colors, dtype=float).reshape(n, 3)
        self.radii = np.asarray(radii, dtype=float).reshape(n)
        self.confidences = np.asarray(confidences, dtype=float).reshape(n)
        self.timestamps = np.asarray(timestamps, dtype=np.int64).reshape(n)
        self.sem_scores = np.asarray(sem_scores, dtype=float).reshape(n, -1)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64).reshape(n)
        self.next_id = int(next_id) if next_id is not None else (
            int(self.ids.max()) + 1 if n else 0)

    @classmethod
    def empty(cls, n_classes: int) -> "SurfelCloud":
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64),
                   np.zeros((0, n_classes)), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_classes(self) -> int:
        return self.sem_scores.shape[1]

    def validate(self) -> None:
        """Check the type invariants; raises ValueError on violation."""
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("surfel normals must be unit length")
        if np.any(self.sem_scores < -UNIT_TOL):
            raise ValueError("semantic scores must be non-negative")
        if np.any(np.abs(self.sem_scores.sum(axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("semantic scores must sum to one")
        if np.any(self.labels != np.argmax(self.sem_scores, axis=1)):
            raise ValueError("label must be the semantic argmax")
        if np.any(self.radii <= 0):
            raise ValueError("surfel radius must be positive")
        if np.any(self.confidences < 0) or np.any(self.timestamps < 0):
            raise ValueError("confidence and timestamp must be non-negative")
        if len(np.unique(self.ids)) != len(self):
            raise ValueError("surfel ids must be unique")

    def append(self, positions, normals, colors, radii, confidences,
               timestamps, sem_scores, labels) -> np.ndarray:
        """Append rows, assigning fresh ids. Returns the new ids."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        m = positions.shape[0]
        new_ids = np.arange(self.next_id, self.next_id + m, dtype=np.int64)
        self.next_id += m
        self.positions = np.vstack([self.positions, positions])
        self.normals = np.vstack([self.normals, np.asarray(normals, float).reshape(m, 3)])
        self.colors = np.vstack([self.colors, np.asarray(colors, float).reshape(m, 3)])
        self.radii = np.concatenate([self.radii, np.asarray(radii, float).reshape(m)])
        self.confidences = np.concatenate(
            [self.confidences, np.asarray(confidences, float).reshape(m)])
        self.timestamps = np.concatenate(
            [self.timestamps, np.asarray(timestamps, np.int64).reshape(m)])
        self.sem_scores = np.vstack(
            [self.sem_scores, np.asarray(sem_scores, float).reshape(m, -1)])
        self.labels = np.concatenate(
            [self.labels, np.asarray(labels, np.int64).reshape(m)])
        self.ids = np.concatenate([self.ids, new_ids])
        return new_ids

    def keep(self, mask: np.ndarray) -> None:
        """Drop rows where mask is False (stale-surfel removal)."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.normals = self.normals[mask]
        self.colors = self.colors[mask]
        self.radii = self.radii[mask]
        self.confidences = self.confidences[mask]
        self.timestamps = self.timestamps[mask]
        self.sem_scores = self.sem_scores[mask]
        self.labels = self.labels[mask]
        self.ids = self.ids[mask]

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(self.positions.copy(), self.normals.copy(),
                           self.colors.copy(), self.radii.copy(),
                           self.confidences.copy(), self.timestamps.copy(),
                           self.sem_scores.copy(), self.labels.copy(),
                           ids=self.ids.copy(), next_id=self.next_id)


def triangle_areas(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Areas of index triangles over (n,3) positions: 0.5 |e_ij x e_ik|."""
    if len(triangles) == 0:
        return np.zeros(0)
    pi = positions[triangles[:, 0]]
    e1 = positions[triangles[:, 1]] - pi
    e2 = positions[triangles[:, 2]] - pi
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


class EDGraph:
    """Sparse deformation graph: node rest positions, symmetric edge pairs
    from the 8-neighbor grid mesh, and the grid triangles with their
    rest areas (recomputed whenever rest positions advance)."""

    def __init__(self, positions, edges, triangles, rest_areas=None,
                 labels=None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = self.positions.shape[0]
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if rest_areas is None:
            rest_areas = triangle_areas(self.positions, self.triangles)
        self.rest_areas = np.asarray(rest_areas, dtype=float).reshape(-1)
        if labels is None:
            labels = np.zeros(n, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        self._validate()

    def _validate(self) -> None:
        n = len(self.positions)
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge index out of range")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("graph edges must not be self-loops")
        pairs = {(int(a), int(b)) for a, b in self.edges}
        if any((b, a) not in pairs for a, b in pairs):
            raise ValueError("graph edges must be symmetric")
        for tri in self.triangles:
            a, b, c = (int(v) for v in tri)
            for e in ((a, b), (b, c), (a, c)):
                if e not in pairs:
                    raise ValueError("triangle edge missing from edge set")
        if len(self.rest_areas) != len(self.triangles):
            raise ValueError("one rest area per triangle")
        if len(self.triangles) and np.any(self.rest_areas <= 0):
            raise ValueError("triangle rest areas must be positive")

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def refresh_rest_areas(self) -> None:
        self.rest_areas = triangle_areas(self.positions, self.triangles)

    def copy(self) -> "EDGraph":
        return EDGraph(self.positions.copy(), self.edges.copy(),
                       self.triangles.copy(), self.rest_areas.copy(),
                       self.labels.copy())


def grid_graph_topology(index_grid: np.ndarray):
    """Edges and triangles for nodes arranged on a sparse 2D grid.

    index_grid: (Gh, Gw) int array of node indices, -1 where the grid cell
    holds no node. Each node connects to its 8 grid neighbors that exist;
    each grid quad whose corners all exist contributes two triangles
    (split along the main diagonal). Returns (edges (E,2) symmetric,
    triangles (T,3)).
    """
    gh, gw = index_grid.shape
    pairs = []
    offsets = [(0, 1), (1, 0), (1, 1), (1, -1)]
    for dr, dc in offsets:
        r0 = max(0, -dr)
        r1 = gh - max(0, dr)
        c0 = max(0, -dc)
        c1 = gw - max(0, dc)
        a = index_grid[r0:r1, c0:c1]
        b = index_grid[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        ok = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
    half = np.vstack(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    edges = np.vstack([half, half[:, ::-1]])
    tl = index_grid[:-1, :-1]
    tr = index_grid[:-1, 1:]
    bl = index_grid[1:, :-1]
    br = index_grid[1:, 1:]
    full = (tl >= 0) & (tr >= 0) & (bl >= 0) & (br >= 0)
    t1 = np.stack([tl[full], tr[full], br[full]], axis=1)
    t2 = np.stack([tl[full], br[full], bl[full]], axis=1)
    triangles = np.vstack([t1, t2]) if full.any() else np.zeros((0, 3), np.int64)
    return edges.astype(np.int64), triangles


def skinning_weights(points: np.ndarray, node_positions: np.ndarray,
                     k: int, allowed_mask: np.ndarray | None = None):
    """Anchor each point to its k nearest nodes with exp(-distance) weights.

    points (N,3), node_positions (n,3). Returns (indices (N,k),
    weights (N,k)); weights are positive and each row sums to one.
    allowed_mask (N,n) optionally restricts which nodes a point may use
    (label-matched anchoring); rows with fewer than k allowed nodes fall
    back to the unrestricted neighborhood.

    Raises ValueError "insufficient graph" when the graph has < k nodes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    node_positions = np.asarray(node_positions, dtype=float)
    n = node_positions.shape[0]
    if n < k:
        raise ValueError("insufficient graph")
    if allowed_mask is None:
        tree = cKDTree(node_positions)
        dist, idx = tree.query(points, k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
    else:
        # Masked k-NN has no KD-tree shortcut; dense distances are fine at
        # graph scale (n is hundreds, not millions).
        d2 = np.sum((points[:, None, :] - node_positions[None, :, :]) ** 2, axis=2)
        allowed = np.asarray(allowed_mask, dtype=bool)
        enough = allowed.sum(axis=1) >= k
        masked = np.where(allowed, d2, np.inf)
        masked[~enough] = d2[~enough]
        idx = np.argpartition(masked, k - 1, axis=1)[:, :k]
        rows = np.arange(len(points))[:, None]
        dist = np.sqrt(d2[rows, idx])
        order = np.argsort(dist, axis=1)
        idx = idx[rows, order]
        dist = dist[rows, order]
    # Shift by the row minimum before exponentiating; cancels in the
    # normalization and avoids underflow for far-away points.
    w = np.exp(-(dist - dist.min(axis=1, keepdims=True)))
    w = w / w.sum(axis=1, keepdims=True)
    return idx.astype(np.int64), w
