"""Marker detection and greedy trajectory linking."""

import numpy as np
import pytest

from surfeltrack.markers import (MarkerConfig, Trajectory, detect_markers,
                                 load_trajectories, save_trajectories,
                                 track_markers)

GREEN = np.array([0.08, 0.86, 0.18])


def disk_image(centers, h=240, w=320, radius=4.0, color=GREEN, base=0.4):
    rgb = np.full((h, w, 3), base)
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    for (u, v) in centers:
        alpha = np.clip(radius + 0.5 - np.hypot(us - u, vs - v), 0.0, 1.0)
        rgb = rgb * (1 - alpha[..., None]) + color * alpha[..., None]
    return rgb


class TestDetect:
    def test_single_disk_found_within_a_pixel(self):
        dets = detect_markers(disk_image([(100.0, 200.0)]))
        assert dets.shape == (1, 2)
        assert np.linalg.norm(dets[0] - (100.0, 200.0)) < 1.0

    def test_pure_red_image_is_empty(self):
        rgb = np.zeros((60, 80, 3))
        rgb[..., 0] = 1.0
        assert detect_markers(rgb).shape == (0, 2)

    def test_two_disks_give_two_detections(self):
        dets = detect_markers(disk_image([(100.0, 120.0), (150.0, 120.0)]))
        assert len(dets) == 2

    def test_thin_smear_rejected_by_circularity(self):
        rgb = np.full((60, 80, 3), 0.4)
        rgb[30:32, 20:50] = GREEN  # 2x30 bar, plenty of area
        assert detect_markers(rgb).shape == (0, 2)

    def test_dark_green_rejected_by_value_gate(self):
        dim = GREEN * 0.15
        dets = detect_markers(disk_image([(40.0, 30.0)], 60, 80, color=dim))
        assert dets.shape == (0, 2)

    def test_detections_sorted_by_row_then_column(self):
        dets = detect_markers(disk_image([(60.0, 100.0), (200.0, 100.0),
                                          (30.0, 40.0)]))
        assert np.array_equal(dets, dets[np.lexsort((dets[:, 0],
                                                     dets[:, 1]))])


class TestTrack:
    def test_moving_detection_stays_one_trajectory(self):
        dets = [np.array([[10.0 + 2 * t, 20.0]]) for t in range(8)]
        trajs = track_markers(dets, max_jump_px=10.0)
        assert len(trajs) == 1
        assert trajs[0].visible.all()
        assert np.allclose(trajs[0].points[:, 0], 10 + 2 * np.arange(8))

    def test_one_frame_dropout_leaves_a_gap(self):
        dets = [np.array([[10.0 + 2 * t, 20.0]]) for t in range(8)]
        dets[4] = np.zeros((0, 2))
        trajs = track_markers(dets, max_jump_px=10.0)
        assert len(trajs) == 1
        assert not trajs[0].visible[4]
        assert trajs[0].visible.sum() == 7

    def test_jump_beyond_limit_starts_a_new_trajectory(self):
        dets = [np.array([[10.0, 10.0]]), np.array([[50.0, 10.0]])]
        trajs = track_markers(dets, max_jump_px=10.0)
        assert len(trajs) == 2

    def test_distant_crossing_tracks_keep_identity(self):
        # cross in column while staying far apart in row
        a = [(10.0 + 4 * t, 20.0) for t in range(10)]
        b = [(46.0 - 4 * t, 90.0) for t in range(10)]
        dets = [np.array([a[t], b[t]]) for t in range(10)]
        trajs = track_markers(dets, max_jump_px=12.0)
        assert len(trajs) == 2
        for traj in trajs:
            assert np.all(traj.points[:, 1] == traj.points[0, 1])

    def test_late_detection_opens_new_trajectory(self):
        dets = [np.zeros((0, 2)), np.zeros((0, 2)), np.array([[5.0, 5.0]])]
        trajs = track_markers(dets, max_jump_px=10.0)
        assert len(trajs) == 1
        assert trajs[0].first_visible() == 2


class TestCsv:
    def test_round_trip(self, tmp_path):
        pts = np.full((5, 2), np.nan)
        pts[1] = (10.25, 20.5)
        pts[3] = (11.0, 21.0)
        trajs = [Trajectory(0, pts),
                 Trajectory(1, np.tile([3.5, 4.5], (5, 1)))]
        path = tmp_path / "t.csv"
        save_trajectories(path, trajs)
        back = load_trajectories(path, n_frames=5)
        assert [t.id for t in back] == [0, 1]
        for got, want in zip(back, trajs):
            assert np.allclose(got.points, want.points, atol=1e-5,
                               equal_nan=True)

    def test_empty_file_loads_empty(self, tmp_path):
        path = tmp_path / "t.csv"
        save_trajectories(path, [])
        assert load_trajectories(path) == []
