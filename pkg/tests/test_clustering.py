"""Tracking and semantic labeling of scattering points."""

import numpy as np
import pytest

from gesturechan.clustering import (
    TrackerConfig,
    Trajectory,
    filter_outliers,
    label_all,
    label_trajectory,
    points_from_trajectories,
    read_labeled_csv,
    track_paths,
    write_labeled_csv,
)
from gesturechan.pipeline import cluster_sequence, points_from_mpc
from gesturechan.scatter_geom import RfConfig, ScatteringPoint
from gesturechan.skeleton import BodyPart, KeypointId, SkeletonFrame
from gesturechan.synthgen import (
    GestureScript,
    ScatterProcessConfig,
    animate,
    export_as_mpc,
    sample_scatter_truth,
    template_positions,
)


def _pt(x, y, z, snap, rcs=0.01):
    return ScatteringPoint(position=np.array([x, y, z], dtype=float), rcs_m2=rcs, snapshot=snap)


def test_track_paths_follows_two_separated_points():
    cfg = TrackerConfig(gate_distance_m=0.15)
    per_snap = []
    for t in range(10):
        per_snap.append([_pt(0.0 + 0.01 * t, 0.0, 0.0, t), _pt(1.0, 0.01 * t, 0.0, t)])
    trajectories = track_paths(per_snap, cfg)
    assert len(trajectories) == 2
    assert all(len(tr.points) == 10 for tr in trajectories)


def test_track_paths_gate_splits_jumps():
    cfg = TrackerConfig(gate_distance_m=0.05)
    per_snap = [[_pt(0.0, 0.0, 0.0, 0)], [_pt(0.3, 0.0, 0.0, 1)]]  # jump > gate
    trajectories = track_paths(per_snap, cfg)
    assert len(trajectories) == 2
    assert [len(tr.points) for tr in trajectories] == [1, 1]


def test_track_paths_is_order_independent(rng):
    cfg = TrackerConfig()
    per_snap = []
    for t in range(30):
        pts = [
            _pt(0.0 + 0.005 * t, 0.0, 0.0, t),
            _pt(0.5, 0.005 * t, 0.2, t),
            _pt(0.9, -0.3, 0.005 * t, t),
        ]
        per_snap.append(pts)
    base = track_paths([list(s) for s in per_snap], cfg)
    shuffled = [list(s) for s in per_snap]
    for s in shuffled:
        rng.shuffle(s)
    other = track_paths(shuffled, cfg)
    key = lambda trs: sorted(tuple(map(tuple, (p.position for p in tr.points))) for tr in trs)
    assert key(base) == key(other)


def test_filter_outliers_drops_far_points():
    frame = SkeletonFrame(0.0, template_positions())
    near = _pt(*frame.positions[int(KeypointId.LEFT_WRIST)], snap=0)
    far = _pt(5.0, 5.0, 5.0, 0)
    cfg = TrackerConfig(outlier_threshold_m=0.25)
    kept = filter_outliers([near, far], [frame], cfg)
    assert kept == [near]


def test_label_trajectory_picks_nearest_part():
    frame = SkeletonFrame(0.0, template_positions())
    wrist = frame.positions[int(KeypointId.LEFT_WRIST)]
    elbow = frame.positions[int(KeypointId.LEFT_ELBOW)]
    mid = 0.5 * (wrist + elbow) + np.array([0.0, 0.0, 0.02])
    tr = Trajectory(path_id=0, points=[_pt(*mid, snap=0)])
    assert label_trajectory(tr, [frame]) is BodyPart.FOREARM_L
    with pytest.raises(ValueError):
        label_trajectory(Trajectory(path_id=1, points=[]), [frame])


def test_label_all_stamps_points():
    frame = SkeletonFrame(0.0, template_positions())
    head = frame.positions[int(KeypointId.NOSE)] + np.array([0.0, 0.0, 0.01])
    tr = Trajectory(path_id=7, points=[_pt(*head, snap=0)])
    label_all([tr], [frame])
    assert tr.label is BodyPart.HEAD
    assert tr.points[0].part is BodyPart.HEAD
    assert tr.points[0].path_id == 7


def test_ground_truth_labels_recovered_above_99_percent(rf):
    # end-to-end invariant: truth -> MPC -> inversion -> tracking -> labels
    seq = animate(GestureScript(left="up", right="down"))
    cfg = ScatterProcessConfig()
    rng = np.random.default_rng(7)
    truth = sample_scatter_truth(seq, cfg, rng, rf)
    points = points_from_mpc(export_as_mpc(truth, rf, cfg, rng), rf)
    labeled, _ = cluster_sequence(points, seq, TrackerConfig())

    truth_part = {}
    for pts in truth.points_by_snapshot:
        for p in pts:
            truth_part[(p.snapshot, round(p.position[0], 9), round(p.position[1], 9), round(p.position[2], 9))] = p.part
    agree = total = 0
    for pts in labeled:
        for p in pts:
            key = (p.snapshot, round(p.position[0], 9), round(p.position[1], 9), round(p.position[2], 9))
            part = truth_part.get(key)
            if part is None:
                continue
            total += 1
            agree += part is p.part
    assert total > 5000
    assert agree / total >= 0.99


def test_tracked_ids_persist_like_truth_paths(rf):
    seq = animate(GestureScript(duration_s=1.3))
    cfg = ScatterProcessConfig()
    rng = np.random.default_rng(11)
    truth = sample_scatter_truth(seq, cfg, rng, rf)
    points = points_from_mpc(export_as_mpc(truth, rf, cfg, rng), rf)
    _, trajectories = cluster_sequence(points, seq, TrackerConfig())
    n_true = len({p.path_id for pts in truth.points_by_snapshot for p in pts})
    assert 0.8 * n_true <= len(trajectories) <= 1.3 * n_true
    lens = sorted(len(tr.points) for tr in trajectories)
    assert lens[len(lens) // 2] > 5  # median trajectory persists


def test_points_from_trajectories_restores_snapshot_order():
    cfg = TrackerConfig()
    per_snap = [[_pt(0, 0, 0, 0)], [_pt(0.01, 0, 0, 1)], [_pt(0.02, 0, 0, 2)]]
    trajectories = track_paths(per_snap, cfg)
    frame = SkeletonFrame(0.0, template_positions())
    label_all(trajectories, [frame] * 3)
    back = points_from_trajectories(trajectories, 3)
    assert [len(s) for s in back] == [1, 1, 1]
    assert all(back[t][0].snapshot == t for t in range(3))


def test_labeled_csv_round_trip(tmp_path):
    pts = [
        ScatteringPoint(position=np.array([0.1, 0.2, 0.3]), rcs_m2=0.05, snapshot=0, part=BodyPart.TORSO, path_id=3),
        ScatteringPoint(position=np.array([-0.4, 0.0, 1.3]), rcs_m2=0.001, snapshot=1, part=None, path_id=None),
    ]
    path = tmp_path / "pts.csv"
    write_labeled_csv(path, pts)
    back = read_labeled_csv(path)
    assert len(back) == 2
    assert back[0].part is BodyPart.TORSO and back[0].path_id == 3
    assert back[1].part is None and back[1].path_id is None
    for a, b in zip(pts, back):
        assert np.allclose(a.position, b.position, rtol=1e-15)
        assert b.rcs_m2 == pytest.approx(a.rcs_m2, rel=1e-15)
