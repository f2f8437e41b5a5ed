import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfeltrack.model import (EDGraph, SurfelCloud, grid_graph_topology,
                               skinning_weights, triangle_areas)

# 1 / (1 + e^-1) and its complement, for the two-node d=1 case.
LOGISTIC_1 = 0.7310585786300049


def make_cloud(n=5, c=3, seed=0):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    sem = rng.uniform(0.1, 1.0, size=(n, c))
    sem /= sem.sum(axis=1, keepdims=True)
    return SurfelCloud(
        positions=rng.normal(size=(n, 3)),
        normals=normals,
        colors=rng.uniform(size=(n, 3)),
        radii=rng.uniform(0.001, 0.01, size=n),
        confidences=np.ones(n),
        timestamps=np.zeros(n, dtype=np.int64),
        sem_scores=sem,
        labels=np.argmax(sem, axis=1),
    )


class TestSkinning:
    def test_coincident_node_distance_one(self):
        nodes = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        idx, w = skinning_weights(np.zeros((1, 3)), nodes, k=2)
        assert idx[0, 0] == 0
        assert np.allclose(w[0], [LOGISTIC_1, 1.0 - LOGISTIC_1], atol=1e-12)

    def test_equidistant_nodes_get_uniform_weights(self):
        nodes = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        _, w = skinning_weights(np.zeros((1, 3)), nodes, k=4)
        assert np.allclose(w[0], 0.25)

    def test_k_one_gives_unit_weight(self):
        nodes = np.array([[0.3, 0.2, 0.1], [5.0, 5.0, 5.0]])
        idx, w = skinning_weights(np.array([[0.0, 0.0, 0.0]]), nodes, k=1)
        assert idx[0, 0] == 0 and w[0, 0] == 1.0

    def test_insufficient_graph(self):
        with pytest.raises(ValueError, match="insufficient graph"):
            skinning_weights(np.zeros((1, 3)), np.zeros((3, 3)) + np.eye(3), k=4)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_weights_on_simplex_and_neighbors_nearest(self, seed):
        rng = np.random.default_rng(seed)
        nodes = rng.normal(size=(12, 3))
        pts = rng.normal(size=(7, 3))
        idx, w = skinning_weights(pts, nodes, k=4)
        assert np.all(w > 0)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)
        d = np.linalg.norm(pts[:, None, :] - nodes[None], axis=2)
        for i in range(len(pts)):
            chosen = d[i, idx[i]]
            others = np.delete(d[i], idx[i])
            assert chosen.max() <= others.min() + 1e-12

    def test_allowed_mask_restricts_and_falls_back(self):
        nodes = np.array([[0.0, 0, 0], [0.1, 0, 0], [5.0, 0, 0], [5.1, 0, 0]])
        pts = np.zeros((2, 3))
        allowed = np.array([[False, False, True, True],
                            [True, False, False, False]])
        idx, w = skinning_weights(pts, nodes, k=2, allowed_mask=allowed)
        assert set(idx[0].tolist()) == {2, 3}          # restricted to far pair
        assert set(idx[1].tolist()) == {0, 1}          # < k allowed: fallback
        assert np.allclose(w.sum(axis=1), 1.0)


class TestGraph:
    def test_full_grid_topology_counts(self):
        grid = np.arange(9).reshape(3, 3)
        edges, tris = grid_graph_topology(grid)
        assert len(edges) == 2 * (6 + 6 + 4 + 4)   # h, v, two diagonals
        assert len(tris) == 8
        g = EDGraph(np.c_[np.indices((3, 3)).reshape(2, -1).T * 0.1,
                          np.zeros(9)], edges, tris)
        assert g.n_nodes == 9 and np.all(g.rest_areas > 0)

    def test_grid_hole_removes_triangles(self):
        grid = np.arange(9).reshape(3, 3).copy()
        grid[1, 1] = -1
        _, tris = grid_graph_topology(grid)
        assert len(tris) == 0  # every 3x3 quad touches the center

    def test_triangle_area_closed_form(self):
        pos = np.array([[0.0, 0, 0], [3.0, 0, 0], [0.0, 4.0, 0]])
        assert np.allclose(triangle_areas(pos, np.array([[0, 1, 2]])), [6.0])

    def test_invariant_violations_raise(self):
        pos = np.zeros((3, 3)) + np.eye(3)
        with pytest.raises(ValueError, match="self-loops"):
            EDGraph(pos, [[0, 0], [0, 0]], np.zeros((0, 3)))
        with pytest.raises(ValueError, match="symmetric"):
            EDGraph(pos, [[0, 1]], np.zeros((0, 3)))
        with pytest.raises(ValueError, match="triangle edge"):
            EDGraph(pos, [[0, 1], [1, 0]], [[0, 1, 2]])


class TestSurfelCloud:
    def test_valid_cloud_passes(self):
        make_cloud().validate()

    def test_bad_rows_rejected(self):
        c = make_cloud()
        c.normals[0] *= 2.0
        with pytest.raises(ValueError, match="unit length"):
            c.validate()
        c = make_cloud()
        c.sem_scores[1] *= 0.5
        with pytest.raises(ValueError, match="sum to one"):
            c.validate()
        c = make_cloud()
        c.labels[2] = (c.labels[2] + 1) % c.n_classes
        with pytest.raises(ValueError, match="argmax"):
            c.validate()

    def test_append_and_keep_preserve_ids(self):
        c = make_cloud(n=4)
        first_ids = c.ids.copy()
        other = make_cloud(n=3, seed=1)
        new_ids = c.append(other.positions, other.normals, other.colors,
                           other.radii, other.confidences, other.timestamps,
                           other.sem_scores, other.labels)
        assert len(c) == 7
        assert len(np.intersect1d(new_ids, first_ids)) == 0
        c.keep(np.array([True, False, True, False, True, True, True]))
        assert len(c) == 5
        assert 1 not in c.ids and 3 not in c.ids
        # ids are never reused even after deletion
        again = c.append(other.positions[:1], other.normals[:1], other.colors[:1],
                         other.radii[:1], other.confidences[:1],
                         other.timestamps[:1], other.sem_scores[:1], other.labels[:1])
        assert again[0] == 7
