"""Skeleton model: keypoint codes, part frames, alignment, resampling."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gesturechan.skeleton import (
    BODY_PART_GEOMETRY,
    BodyPart,
    GestureSequence,
    KeypointId,
    N_KEYPOINTS,
    SkeletonFrame,
    align_sequence,
    interpolate_sequence,
    local_frame,
    min_part_distance,
    part_axis,
    point_to_part_distance,
    read_keypoints_csv,
    sequence_velocities,
    write_keypoints_csv,
)
from gesturechan.synthgen import GestureScript, animate, template_positions


def test_keypoint_codes_are_stable():
    assert N_KEYPOINTS == 19
    assert len(KeypointId) == 19
    assert sorted(int(k) for k in KeypointId) == list(range(19))


def test_body_part_codes_are_stable():
    assert [p.name for p in sorted(BodyPart)] == [
        "FOREARM_L",
        "FOREARM_R",
        "UPPER_ARM_L",
        "UPPER_ARM_R",
        "HEAD",
        "TORSO",
    ]
    assert [int(p) for p in sorted(BodyPart)] == list(range(6))
    for part in BodyPart:
        assert BodyPart.from_tag(part.tag) is part


def test_every_part_has_segments_and_axis():
    frame = SkeletonFrame(0.0, template_positions())
    for part in BodyPart:
        geo = BODY_PART_GEOMETRY[part]
        assert len(geo.segments) >= 1
        a, b = part_axis(frame, part)
        assert np.linalg.norm(b - a) > 0.05  # axes are real limbs, not points


@pytest.mark.parametrize("part", list(BodyPart))
def test_local_frame_is_right_handed_orthonormal(part, rf):
    frame = SkeletonFrame(0.0, template_positions())
    fr = local_frame(frame, part, rf.tx_position)
    R = fr.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    # gamma is the transverse part of the transceiver direction
    assert abs(fr.gamma @ fr.zeta) < 1e-12
    to_tx = np.asarray(rf.tx_position) - fr.origin
    transverse = to_tx - (to_tx @ fr.zeta) * fr.zeta
    assert fr.gamma @ transverse > 0


@given(
    st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3),
    st.sampled_from(list(BodyPart)),
)
def test_local_global_round_trip(xyz, part):
    frame = SkeletonFrame(0.0, template_positions())
    fr = local_frame(frame, part, (0.0, 0.0, 0.8))
    p = np.array(xyz)
    assert np.allclose(fr.to_global(fr.to_local(p)), p, atol=1e-12)
    assert np.allclose(fr.to_local(fr.to_global(p)), p, atol=1e-12)


def test_local_frame_singular_axis_needs_fallback():
    pos = template_positions()
    frame = SkeletonFrame(0.0, pos)
    a, b = part_axis(frame, BodyPart.FOREARM_L)
    tx_on_axis = b + 2.0 * (b - a)  # transceiver along the limb axis
    with pytest.raises(ValueError):
        local_frame(frame, BodyPart.FOREARM_L, tx_on_axis)
    fr = local_frame(frame, BodyPart.FOREARM_L, tx_on_axis, fallback_gamma=np.array([0.0, 0.0, 1.0]))
    assert np.allclose(fr.rotation.T @ fr.rotation, np.eye(3), atol=1e-12)


def test_align_sequence_puts_first_belly_at_origin(short_seq):
    aligned = align_sequence(short_seq)
    assert np.allclose(aligned.frames[0].keypoint(KeypointId.BELLY), 0.0, atol=1e-12)
    # one shared offset: inter-frame motion is untouched
    for t in range(1, len(short_seq)):
        want = short_seq.frames[t].positions - short_seq.frames[0].positions
        got = aligned.frames[t].positions - aligned.frames[0].positions
        assert np.allclose(got, want, atol=1e-12)


def test_align_sequence_custom_reference(short_seq):
    ref = np.array([1.0, -2.0, 0.5])
    aligned = align_sequence(short_seq, ref)
    assert np.allclose(aligned.frames[0].keypoint(KeypointId.BELLY), ref, atol=1e-12)


def _linear_sequence(n=9, dt=0.01, slope=None):
    slope = np.array([0.3, -0.1, 0.2]) if slope is None else slope
    base = template_positions()
    frames = [SkeletonFrame(i * dt, base + i * dt * slope) for i in range(n)]
    return GestureSequence(frames)


def test_interpolate_preserves_endpoints_and_linearity():
    seq = _linear_sequence(n=9, dt=0.01)
    out = interpolate_sequence(seq, 0.004)
    assert out.frame_interval() == pytest.approx(0.004)
    assert np.allclose(out.frames[0].positions, seq.frames[0].positions)
    assert np.allclose(out.frames[-1].positions, seq.frames[-1].positions)
    # linear motion is reproduced exactly at interior samples
    slope = np.array([0.3, -0.1, 0.2])
    for fr in out.frames:
        assert np.allclose(fr.positions, template_positions() + fr.time * slope, atol=1e-12)


def test_velocities_exact_for_linear_motion():
    slope = np.array([0.4, 0.0, -0.25])
    seq = _linear_sequence(n=15, dt=0.002, slope=slope)
    vel = sequence_velocities(seq, smooth_window=5)
    assert vel.shape == (15, N_KEYPOINTS, 3)
    assert np.allclose(vel, slope, atol=1e-9)


def test_velocities_smoothing_window_one_is_identity_path():
    seq = animate(GestureScript(duration_s=0.1, interval_s=0.0026))
    v0 = sequence_velocities(seq, smooth_window=0)
    v1 = sequence_velocities(seq, smooth_window=1)
    assert np.array_equal(v0, v1)


def test_point_to_part_distance_matches_dense_sampling(rng):
    frame = SkeletonFrame(0.0, template_positions())
    for part in BodyPart:
        geo = BODY_PART_GEOMETRY[part]
        for _ in range(5):
            p = rng.normal(0.0, 0.6, size=3) + frame.positions[int(geo.segments[0][0])]
            d = point_to_part_distance(p, part, frame)
            # brute force over densely sampled segment points
            best = np.inf
            for ka, kb in geo.segments:
                a = frame.positions[int(ka)]
                b = frame.positions[int(kb)]
                ts = np.linspace(0.0, 1.0, 2001)[:, None]
                pts = a + ts * (b - a)
                best = min(best, float(np.linalg.norm(pts - p, axis=1).min()))
            assert d == pytest.approx(best, abs=1e-6)


def test_min_part_distance_is_argmin(rng):
    frame = SkeletonFrame(0.0, template_positions())
    for _ in range(20):
        p = rng.normal(0.0, 0.5, size=3) + np.array([0.9, 0.0, 0.6])
        d, part = min_part_distance(p, frame)
        per = {q: point_to_part_distance(p, q, frame) for q in BodyPart}
        assert d == pytest.approx(min(per.values()))
        assert per[part] == d


def test_keypoints_csv_round_trip(tmp_path, short_seq):
    path = tmp_path / "kp.csv"
    write_keypoints_csv(path, short_seq)
    back = read_keypoints_csv(path)
    assert len(back) == len(short_seq)
    assert back.subject == short_seq.subject
    assert back.gesture == short_seq.gesture
    assert np.array_equal(back.times, short_seq.times)
    assert np.array_equal(back.stacked_positions(), short_seq.stacked_positions())
