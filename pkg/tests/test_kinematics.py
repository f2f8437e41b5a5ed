import numpy as np
import pytest

from surfeltrack.kinematics import (DeformationState, accumulate_node_gradient,
                                    accumulate_point_gradient,
                                    param_vector_size, quat_from_axis_angle,
                                    quat_to_rotation, rotate_vec_quat_jacobian,
                                    transform_normals, transform_points,
                                    transform_points_and_blend,
                                    transformed_node_positions)
from gradcheck import central_diff, max_rel_err


def random_scene(seed, n_points=30, k=4):
    """3x3 node grid plus points and noisy non-identity parameters."""
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.linspace(-0.1, 0.1, 3), np.linspace(-0.1, 0.1, 3))
    node_pos = np.c_[gx.ravel(), gy.ravel(), np.zeros(9)]
    pts = rng.uniform(-0.12, 0.12, size=(n_points, 3)) * [1, 1, 0.2]
    d = np.linalg.norm(pts[:, None, :] - node_pos[None], axis=2)
    idx = np.argsort(d, axis=1)[:, :k]
    dd = np.take_along_axis(d, idx, axis=1)
    w = np.exp(-dd)
    w /= w.sum(axis=1, keepdims=True)
    state = DeformationState.identity(9)
    state.node_quats += rng.normal(scale=0.05, size=(9, 4))
    state.node_trans += rng.normal(scale=0.01, size=(9, 3))
    state.global_quat += rng.normal(scale=0.05, size=4)
    state.global_trans += rng.normal(scale=0.01, size=3)
    return node_pos, pts, idx, w, state


class TestRotation:
    def test_identity(self):
        assert np.allclose(quat_to_rotation(np.array([1.0, 0, 0, 0])), np.eye(3))

    def test_ninety_about_z(self):
        R = quat_to_rotation(quat_from_axis_angle([0, 0, 1], np.pi / 2))
        assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)

    def test_scale_invariance(self):
        q = np.array([0.3, -0.4, 0.8, 0.1])
        assert np.allclose(quat_to_rotation(q), quat_to_rotation(2.5 * q))
        R = quat_to_rotation(q)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            quat_to_rotation(np.zeros(4))


class TestTransform:
    def test_identity_params_are_identity_map(self):
        node_pos, pts, idx, w, _ = random_scene(0)
        state = DeformationState.identity(9)
        out = transform_points(pts, state, idx, w, node_pos)
        assert np.max(np.abs(out - pts)) < 1e-12
        rng = np.random.default_rng(1)
        normals = rng.normal(size=(len(pts), 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        assert np.max(np.abs(transform_normals(normals, state, idx, w) - normals)) < 1e-12

    def test_shared_translation_moves_all_points(self):
        node_pos, pts, idx, w, _ = random_scene(2)
        state = DeformationState.identity(9)
        state.node_trans[:] = [0.01, -0.02, 0.03]
        out = transform_points(pts, state, idx, w, node_pos)
        assert np.allclose(out, pts + [0.01, -0.02, 0.03], atol=1e-12)

    def test_single_node_hand_rotation(self):
        node_pos = np.zeros((1, 3))
        state = DeformationState.identity(1)
        state.node_quats[0] = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        idx = np.array([[0]])
        w = np.array([[1.0]])
        out = transform_points(np.array([[1.0, 0, 0]]), state, idx, w, node_pos)
        assert np.allclose(out[0], [0, 1, 0], atol=1e-9)
        nrm = transform_normals(np.array([[1.0, 0, 0]]), state, idx, w)
        assert np.allclose(nrm[0], [0, 1, 0], atol=1e-9)

    def test_global_only_equals_rigid_motion(self):
        node_pos, pts, idx, w, _ = random_scene(3)
        state = DeformationState.identity(9)
        state.global_quat = quat_from_axis_angle([0.3, -1.0, 0.5], 0.7)
        state.global_trans = np.array([0.05, 0.01, -0.02])
        out = transform_points(pts, state, idx, w, node_pos)
        R = quat_to_rotation(state.global_quat)
        assert np.allclose(out, pts @ R.T + state.global_trans, atol=1e-12)

    def test_neighbor_permutation_invariance(self):
        node_pos, pts, idx, w, state = random_scene(4)
        out = transform_points(pts, state, idx, w, node_pos)
        perm = np.array([2, 0, 3, 1])
        out2 = transform_points(pts, state, idx[:, perm], w[:, perm], node_pos)
        assert np.allclose(out, out2, atol=1e-13)

    def test_opposed_rotations_cancel_in_normal_blend(self):
        node_pos = np.array([[0.0, 0, -1], [0.0, 0, 1]])
        idx = np.array([[0, 1]])
        w = np.array([[0.5, 0.5]])
        for theta in (0.2, 0.7, 1.2):
            state = DeformationState.identity(2)
            state.node_quats[0] = quat_from_axis_angle([0, 0, 1], theta)
            state.node_quats[1] = quat_from_axis_angle([0, 0, 1], -theta)
            out = transform_normals(np.array([[1.0, 0, 0]]), state, idx, w)
            assert np.allclose(out[0], [1, 0, 0], atol=1e-12)

    def test_fully_cancelled_blend_is_degenerate(self):
        node_pos = np.array([[0.0, 0, -1], [0.0, 0, 1]])
        state = DeformationState.identity(2)
        state.node_quats[0] = quat_from_axis_angle([0, 0, 1], np.pi / 2)
        state.node_quats[1] = quat_from_axis_angle([0, 0, 1], -np.pi / 2)
        with pytest.raises(ValueError, match="degenerate normal blend"):
            transform_normals(np.array([[1.0, 0, 0]]),
                              state, np.array([[0, 1]]), np.array([[0.5, 0.5]]))


class TestParamsVector:
    def test_size_and_roundtrip(self):
        state = DeformationState.identity(5)
        assert state.size == param_vector_size(5) == 42
        rng = np.random.default_rng(7)
        state.node_quats += rng.normal(size=(5, 4))
        state.node_trans += rng.normal(size=(5, 3))
        vec = state.to_vector()
        back = DeformationState.from_vector(vec, 5)
        assert np.array_equal(back.to_vector(), vec)

    def test_grow_appends_identity(self):
        state = DeformationState.identity(2)
        state.node_trans[0] = [1, 2, 3]
        grown = state.grow(3)
        assert grown.n_nodes == 5
        assert np.allclose(grown.node_trans[0], [1, 2, 3])
        assert np.allclose(grown.node_quats[2:], [[1, 0, 0, 0]] * 3)
        assert np.allclose(grown.node_trans[2:], 0)


class TestGradients:
    def test_quat_jacobian_matches_fd(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            q = rng.normal(size=4)
            q /= max(np.linalg.norm(q), 0.3)
            v = rng.normal(size=3)
            a = rng.normal(size=3)
            analytic = rotate_vec_quat_jacobian(q, v, a)
            fd = central_diff(
                lambda x: float(a @ quat_to_rotation(x) @ v), q, h=1e-6)
            assert max_rel_err(analytic, fd) < 1e-6

    def test_point_adjoint_chain_matches_fd(self):
        for seed in range(5):
            node_pos, pts, idx, w, state = random_scene(seed)
            rng = np.random.default_rng(100 + seed)
            adj = rng.normal(size=pts.shape)

            def loss(vec):
                s = DeformationState.from_vector(vec, 9)
                return float(np.sum(adj * transform_points(pts, s, idx, w, node_pos)))

            grad = np.zeros(state.size)
            _, blended = transform_points_and_blend(pts, state, idx, w, node_pos)
            accumulate_point_gradient(grad, adj, pts, blended, state, idx, w, node_pos)
            fd = central_diff(loss, state.to_vector(), h=1e-6)
            assert max_rel_err(grad, fd) < 1e-6

    def test_node_adjoint_chain_matches_fd(self):
        node_pos, _, _, _, state = random_scene(8)
        rng = np.random.default_rng(9)
        adj = rng.normal(size=(9, 3))

        def loss(vec):
            s = DeformationState.from_vector(vec, 9)
            return float(np.sum(adj * transformed_node_positions(s, node_pos)))

        grad = np.zeros(state.size)
        accumulate_node_gradient(grad, adj, state, node_pos)
        fd = central_diff(loss, state.to_vector(), h=1e-6)
        # node positions ignore q_j by design; FD must agree there too
        assert max_rel_err(grad, fd) < 1e-6
