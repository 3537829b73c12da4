"""Tests for channel synthesis and the derived delay/Doppler statistics."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gesturechan.channel import (
    ChannelSnapshot,
    DelayProfile,
    PathSample,
    Spectrogram,
    _PhaseBook,
    angular_velocity,
    cdf,
    doppler_shift,
    instantaneous_spectrum,
    path_delay,
    pdp,
    point_velocity,
    read_cir_csv,
    read_delay_profile_csv,
    read_rmsds_csv,
    read_spectrogram_csv,
    ridge_frequencies,
    rmsds,
    rmsds_timeseries,
    slow_time_signal,
    snapshot_rmsds,
    stft_spectrogram,
    synthesize_sequence,
    synthesize_snapshot,
    wrap_phase,
    write_cir_csv,
    write_delay_profile_csv,
    write_rmsds_csv,
    write_spectrogram_csv,
)
from gesturechan.scatter_geom import RfConfig, ScatteringPoint, amplitude_from_rcs
from gesturechan.skeleton import BodyPart, sequence_velocities
from gesturechan.synthgen import GestureScript, animate

TWO_PI = 2.0 * math.pi


def _tap(delay_s=1e-9, gain=1.0, doppler_hz=0.0, phase_rad=0.0,
         part=BodyPart.TORSO, snapshot=0, path_id=None):
    return PathSample(
        delay_s=delay_s, gain=gain, doppler_hz=doppler_hz,
        phase_rad=phase_rad, part=part, snapshot=snapshot, path_id=path_id,
    )


def test_path_sample_validation():
    _tap(phase_rad=-math.pi)  # closed lower edge
    with pytest.raises(ValueError, match="non-positive delay"):
        _tap(delay_s=0.0)
    with pytest.raises(ValueError, match="negative gain"):
        _tap(gain=-1e-6)
    with pytest.raises(ValueError, match="phase outside"):
        _tap(phase_rad=math.pi)


@given(st.floats(-1e6, 1e6))
def test_wrap_phase_range_and_equivalence(phi):
    w = wrap_phase(phi)
    assert -math.pi <= w < math.pi
    assert math.cos(w) == pytest.approx(math.cos(phi), abs=1e-6)
    assert math.sin(w) == pytest.approx(math.sin(phi), abs=1e-6)


def test_wrap_phase_pi_maps_to_minus_pi():
    assert wrap_phase(math.pi) == -math.pi


def test_path_delay_unit_distance(rf):
    assert path_delay([0.0, 1.0, 0.0], rf) == pytest.approx(
        6.671281903963041e-09, rel=0, abs=0
    )
    with pytest.raises(ValueError, match="coincides"):
        path_delay([0.0, 0.0, 0.0], rf)


def test_doppler_literal_and_perpendicular(rf):
    pos = np.array([0.0, 2.0, 0.0])
    toward_tx = np.array([0.0, -1.0, 0.0])  # 1 m/s closing speed
    assert doppler_shift(toward_tx, pos, rf) == pytest.approx(
        190.13153426294667, rel=1e-12
    )
    assert doppler_shift(np.array([1.0, 0.0, 0.0]), pos, rf) == 0.0
    assert doppler_shift(np.array([0.0, 0.0, -3.0]), pos, rf) == 0.0


def test_angular_velocity_recovers_transverse_rate():
    r_a = np.array([0.1, 0.2, 0.3])
    r_b = r_a + np.array([0.5, 0.0, 0.0])
    omega = np.array([0.0, 0.7, -0.3])  # no axis component
    v0 = np.array([0.2, -0.1, 0.05])
    v_a = v0 + np.cross(omega, r_a)
    v_b = v0 + np.cross(omega, r_b)
    got = angular_velocity(r_a, r_b, v_a, v_b)
    assert np.allclose(got, omega, atol=1e-12)

    spun = omega + np.array([2.0, 0.0, 0.0])  # axis spin is unobservable
    v_b2 = v0 + np.cross(spun, r_b)
    v_a2 = v0 + np.cross(spun, r_a)
    assert np.allclose(angular_velocity(r_a, r_b, v_a2, v_b2), omega, atol=1e-12)


def test_angular_velocity_degenerate_axis():
    with pytest.raises(ValueError, match="degenerate segment axis"):
        angular_velocity([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])


@given(
    seed=st.integers(0, 2**31 - 1),
    frac=st.floats(-1.0, 2.0),
)
def test_rigid_field_round_trip(seed, frac):
    """Recovered rotation reproduces velocities anywhere on the segment."""
    rng = np.random.default_rng(seed)
    r_a = rng.normal(size=3)
    axis = rng.normal(size=3)
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([1.0, 0.0, 0.0])
    r_b = r_a + axis
    omega = rng.normal(size=3)
    v0 = rng.normal(size=3)
    v = lambda r: v0 + np.cross(omega, r)
    got = angular_velocity(r_a, r_b, v(r_a), v(r_b))
    r_n = r_a + frac * (r_b - r_a)
    assert np.allclose(point_velocity(r_n, r_a, v(r_a), got), v(r_n), atol=1e-7)


def test_phase_book_accumulates_wrapped_increments():
    book = _PhaseBook(np.random.default_rng(5))
    psi0 = np.random.default_rng(5).uniform(-math.pi, math.pi)
    dt = 1e-3
    p1 = book.advance(7, 100.0, dt)
    p2 = book.advance(7, 250.0, dt)
    assert p1 == pytest.approx(wrap_phase(psi0 + TWO_PI * 100.0 * dt), abs=1e-12)
    assert p2 == pytest.approx(wrap_phase(psi0 + TWO_PI * (100.0 + 250.0) * dt), abs=1e-12)


def test_phase_book_untracked_paths_draw_fresh():
    book = _PhaseBook(np.random.default_rng(0))
    a = book.advance(None, 0.0, 1e-3)
    b = book.advance(None, 0.0, 1e-3)
    assert -math.pi <= a < math.pi and -math.pi <= b < math.pi
    assert a != b


def _moving_arm_setup():
    seq = animate(GestureScript(left="up", right="static", duration_s=0.26))
    vel = sequence_velocities(seq)
    t = len(seq) // 2
    frame = seq.frames[t]
    mid = 0.5 * (frame.positions[0] + frame.positions[1])
    points = [
        ScatteringPoint(position=mid + [0.01, 0.0, 0.02], rcs_m2=0.02,
                        snapshot=t, part=BodyPart.FOREARM_L, path_id=3),
        ScatteringPoint(position=frame.positions[9] + [0.0, -0.05, 0.0],
                        rcs_m2=0.05, snapshot=t, part=BodyPart.TORSO, path_id=4),
    ]
    return seq, vel, t, frame, points


def test_synthesize_snapshot_taps_match_composed_physics(rf):
    from gesturechan.channel import part_motion

    seq, vel, t, frame, points = _moving_arm_setup()
    snap = synthesize_snapshot(points, frame, vel[t], rf, rng=np.random.default_rng(1))
    assert len(snap) == len(points)
    assert snap.time_s == frame.time
    for p, tap in zip(points, snap.paths):
        d = np.linalg.norm(p.position - rf.tx_position)
        assert tap.delay_s == pytest.approx(2.0 * d / rf.c0, rel=1e-15)
        assert tap.gain == pytest.approx(amplitude_from_rcs(p.rcs_m2, d, rf), rel=1e-15)
        r_a, r_b, v_a, v_b = part_motion(frame, vel[t], p.part)
        omega = angular_velocity(r_a, r_b, v_a, v_b)
        v_n = point_velocity(p.position, r_a, v_a, omega)
        assert tap.doppler_hz == pytest.approx(doppler_shift(v_n, p.position, rf), rel=1e-12)
        assert tap.part == p.part and tap.path_id == p.path_id


def test_synthesize_snapshot_requires_labels(rf):
    seq, vel, t, frame, points = _moving_arm_setup()
    bare = [ScatteringPoint(position=points[0].position, rcs_m2=0.01, snapshot=t)]
    with pytest.raises(ValueError, match="without a part label"):
        synthesize_snapshot(bare, frame, vel[t], rf)


def test_synthesize_sequence_phase_continuity(rf):
    """A tracked path's phase advances by 2*pi*doppler*dt each snapshot."""
    seq, vel, _, _, _ = _moving_arm_setup()
    dt = seq.frame_interval()
    points_by_snapshot = []
    for t, frame in enumerate(seq.frames):
        mid = 0.5 * (frame.positions[0] + frame.positions[1])
        points_by_snapshot.append(
            [ScatteringPoint(position=mid, rcs_m2=0.02, snapshot=t,
                             part=BodyPart.FOREARM_L, path_id=11)]
        )
    snaps = synthesize_sequence(seq, points_by_snapshot, rf, rng=np.random.default_rng(3))
    assert len(snaps) == len(seq)
    for prev, cur in zip(snaps, snaps[1:]):
        expected = wrap_phase(prev.paths[0].phase_rad + TWO_PI * cur.paths[0].doppler_hz * dt)
        assert cur.paths[0].phase_rad == pytest.approx(expected, abs=1e-9)


def test_synthesize_sequence_length_mismatch(rf):
    seq, _, _, _, _ = _moving_arm_setup()
    with pytest.raises(ValueError, match="one point list per skeleton frame"):
        synthesize_sequence(seq, [[]] * (len(seq) - 1), rf)


def test_pdp_bins_and_conserves_power(rf):
    bin_s = 1.0 / rf.bandwidth_hz
    snap = ChannelSnapshot(time_s=0.0, paths=[
        _tap(delay_s=0.2 * bin_s, gain=1.0),
        _tap(delay_s=0.9 * bin_s, gain=2.0),   # same bin as above
        _tap(delay_s=3.5 * bin_s, gain=0.25),
    ])
    prof = pdp(snap, rf)
    assert prof.bin_s == bin_s
    assert prof.power.shape == (4,)
    assert prof.power[0] == pytest.approx(3.0)
    assert prof.power[3] == pytest.approx(0.25)
    assert prof.power[1] == prof.power[2] == 0.0
    assert prof.total_power() == pytest.approx(snap.total_power(), rel=0, abs=0)
    assert np.array_equal(prof.delays_s, np.arange(4) * bin_s)


def test_pdp_empty_snapshot(rf):
    prof = pdp(ChannelSnapshot(time_s=0.0, paths=[]), rf)
    assert prof.power.size == 0 and prof.delays_s.size == 0


def test_delay_profile_validation():
    with pytest.raises(ValueError, match="length mismatch"):
        DelayProfile(delays_s=np.zeros(3), power=np.zeros(2), bin_s=1e-9)
    with pytest.raises(ValueError, match="negative power"):
        DelayProfile(delays_s=np.zeros(2), power=np.array([1.0, -1.0]), bin_s=1e-9)


def test_rmsds_two_tap_value():
    # delays 10 ns and 20 ns with powers 1 and 3: sqrt(18.75) ns
    prof = DelayProfile(delays_s=np.array([1e-8, 2e-8]), power=np.array([1.0, 3.0]), bin_s=1e-9)
    assert rmsds(prof) == pytest.approx(4.330127018922195e-09, rel=1e-12)
    snap = ChannelSnapshot(time_s=0.0, paths=[
        _tap(delay_s=1e-8, gain=1.0), _tap(delay_s=2e-8, gain=3.0),
    ])
    assert snapshot_rmsds(snap) == pytest.approx(4.330127018922195e-09, rel=1e-12)


def test_rmsds_single_tap_is_zero():
    assert snapshot_rmsds(ChannelSnapshot(time_s=0.0, paths=[_tap()])) == 0.0


def test_rmsds_errors():
    with pytest.raises(ValueError, match="empty snapshot"):
        snapshot_rmsds(ChannelSnapshot(time_s=0.0, paths=[]))
    with pytest.raises(ValueError, match="zero total power"):
        rmsds(DelayProfile(delays_s=np.array([1e-9]), power=np.array([0.0]), bin_s=1e-9))


def test_rmsds_timeseries_nan_and_binning(rf):
    bin_s = 1.0 / rf.bandwidth_hz
    close = ChannelSnapshot(time_s=0.0, paths=[
        _tap(delay_s=0.1 * bin_s, gain=1.0), _tap(delay_s=0.6 * bin_s, gain=1.0),
    ])
    empty = ChannelSnapshot(time_s=1.0, paths=[])
    series = rmsds_timeseries([close, empty], cfg=rf)
    assert series[0] > 0 and np.isnan(series[1])
    binned = rmsds_timeseries([close, empty], binned=True, cfg=rf)
    assert binned[0] == 0.0  # both taps share the first delay bin
    assert np.isnan(binned[1])


def test_cdf_ranks():
    x, f = cdf([3.0, 1.0, 2.0])
    assert np.array_equal(x, [1.0, 2.0, 3.0])
    assert np.allclose(f, [1 / 3, 2 / 3, 1.0])
    with pytest.raises(ValueError, match="empty sample"):
        cdf([])
    with pytest.raises(ValueError, match="non-finite"):
        cdf([1.0, np.nan])


def test_instantaneous_spectrum_conserves_power():
    snap = ChannelSnapshot(time_s=0.0, paths=[
        _tap(doppler_hz=12.3, gain=1.0),
        _tap(doppler_hz=-40.0, gain=2.0),
        _tap(doppler_hz=0.0, gain=0.5),
    ])
    freqs, power = instantaneous_spectrum(snap, bin_hz=5.0)
    assert power.sum() == pytest.approx(snap.total_power(), rel=0, abs=0)
    assert freqs[power > 0].size == 3
    zero_bin = int(np.flatnonzero(freqs == 0.0)[0])
    assert power[zero_bin] == pytest.approx(0.5)

    # A deliberately narrow axis clips into the edge bins without loss.
    freqs2, power2 = instantaneous_spectrum(snap, bin_hz=5.0, f_max_hz=10.0)
    assert power2.sum() == pytest.approx(snap.total_power(), rel=0, abs=0)
    assert power2[0] == pytest.approx(2.0) and power2[-1] == pytest.approx(1.0)


def test_instantaneous_spectrum_rejects_bad_bin():
    with pytest.raises(ValueError, match="non-positive bin width"):
        instantaneous_spectrum(ChannelSnapshot(time_s=0.0, paths=[]), bin_hz=0.0)


def _tone_snapshots(freq_hz, n, dt, gain=1.0):
    snaps = []
    for i in range(n):
        t = i * dt
        snaps.append(ChannelSnapshot(time_s=t, paths=[
            _tap(gain=gain, doppler_hz=freq_hz, phase_rad=wrap_phase(TWO_PI * freq_hz * t)),
        ]))
    return snaps


def test_stft_parseval_per_frame():
    rng = np.random.default_rng(8)
    n, wl, hop, dt = 40, 16, 8, 1e-3
    snaps = []
    for i in range(n):
        snaps.append(ChannelSnapshot(time_s=i * dt, paths=[
            _tap(gain=float(rng.uniform(0.1, 2.0)),
                 phase_rad=wrap_phase(float(rng.uniform(-10, 10)))),
        ]))
    spec = stft_spectrogram(snaps, window_len=wl, hop=hop)
    signal = slow_time_signal(snaps)
    window = np.hanning(wl)
    starts = list(range(0, n - wl + 1, hop))
    assert spec.power.shape == (len(starts), wl)
    for row, s0 in zip(spec.power, starts):
        seg = signal[s0 : s0 + wl] * window
        assert row.sum() == pytest.approx(float(np.sum(np.abs(seg) ** 2)), rel=1e-12)


def test_stft_pure_tone_ridge():
    dt = 1e-3
    wl = 32
    freq = 5 * (1.0 / dt) / wl  # exactly on a DFT bin: 156.25 Hz
    snaps = _tone_snapshots(freq, 96, dt)
    spec = stft_spectrogram(snaps, window_len=wl, hop=16)
    assert np.all(ridge_frequencies(spec) == freq)
    assert spec.interval_s == dt
    assert spec.doppler_hz.size == wl


def test_stft_validation():
    snaps = _tone_snapshots(10.0, 8, 1e-3)
    with pytest.raises(ValueError, match="window does not fit"):
        stft_spectrogram(snaps, window_len=16, hop=4)
    with pytest.raises(ValueError, match="non-positive hop"):
        stft_spectrogram(snaps, window_len=4, hop=0)
    snaps[3].time_s += 4e-4
    with pytest.raises(ValueError, match="non-uniform snapshot timing"):
        stft_spectrogram(snaps, window_len=4, hop=2)


def test_ridge_frequencies_argmax():
    spec = Spectrogram(
        times_s=np.array([0.0, 1.0]),
        doppler_hz=np.array([-10.0, 0.0, 10.0]),
        power=np.array([[0.1, 0.9, 0.2], [0.0, 0.1, 3.0]]),
        window_len=4, hop=2, interval_s=1e-3,
    )
    assert np.array_equal(ridge_frequencies(spec), [0.0, 10.0])


def test_spectrogram_axis_validation():
    with pytest.raises(ValueError, match="does not match axes"):
        Spectrogram(times_s=np.zeros(2), doppler_hz=np.zeros(3),
                    power=np.zeros((2, 2)), window_len=4, hop=2, interval_s=1e-3)


def test_cir_csv_round_trip(tmp_path):
    snaps = [
        ChannelSnapshot(time_s=0.0, paths=[
            _tap(delay_s=3.2e-9, gain=1.5e-8, doppler_hz=120.25,
                 phase_rad=0.75, part=BodyPart.FOREARM_R, path_id=4),
            _tap(delay_s=4.1e-9, gain=2e-9, doppler_hz=-3.5,
                 phase_rad=-3.0, part=None, path_id=None),
        ]),
        ChannelSnapshot(time_s=0.0026, paths=[]),
        ChannelSnapshot(time_s=0.0052, paths=[
            _tap(delay_s=5e-9, gain=1e-9, part=BodyPart.HEAD, snapshot=2, path_id=9),
        ]),
    ]
    path = tmp_path / "cir.csv"
    write_cir_csv(path, snaps)
    back = read_cir_csv(path)
    assert len(back) == 3
    assert len(back[1]) == 0
    for orig, got in zip(snaps[0].paths, back[0].paths):
        assert got.delay_s == pytest.approx(orig.delay_s, rel=1e-15)
        assert got.gain == orig.gain
        assert got.doppler_hz == orig.doppler_hz
        assert got.phase_rad == orig.phase_rad
        assert got.part == orig.part
        assert got.path_id == orig.path_id
    assert back[2].paths[0].part == BodyPart.HEAD
    assert back[2].time_s == pytest.approx(0.0052)


def test_cir_csv_rejects_foreign_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("# pipeline_version=1\nsnapshot,delay\n0,1\n")
    with pytest.raises(ValueError, match="unexpected CIR CSV header"):
        read_cir_csv(bad)
    empty = tmp_path / "empty.csv"
    empty.write_text("# pipeline_version=1\n")
    with pytest.raises(ValueError, match="empty CIR file"):
        read_cir_csv(empty)


def test_rmsds_csv_round_trip(tmp_path):
    times = np.array([0.0, 0.0026, 0.0052])
    values = np.array([3.3e-9, np.nan, 4.1e-9])
    path = tmp_path / "rmsds.csv"
    write_rmsds_csv(path, times, values)
    t2, v2 = read_rmsds_csv(path)
    assert np.allclose(t2, times)
    assert v2[0] == pytest.approx(3.3e-9, rel=1e-12)
    assert np.isnan(v2[1])
    assert v2[2] == pytest.approx(4.1e-9, rel=1e-12)


def test_delay_profile_csv_round_trip(tmp_path):
    prof = DelayProfile(
        delays_s=np.array([0.0, 5e-10, 1e-9]),
        power=np.array([1e-8, 0.0, 2.5e-9]),
        bin_s=5e-10,
    )
    path = tmp_path / "pdp.csv"
    write_delay_profile_csv(path, prof)
    back = read_delay_profile_csv(path)
    assert back.bin_s == prof.bin_s
    assert np.array_equal(back.delays_s, prof.delays_s)
    assert np.array_equal(back.power, prof.power)

    bare = tmp_path / "bare.csv"
    bare.write_text("delay_s,power\n")
    with pytest.raises(ValueError, match="missing bin width header"):
        read_delay_profile_csv(bare)


def test_spectrogram_csv_round_trip(tmp_path):
    snaps = _tone_snapshots(125.0, 24, 1e-3)
    spec = stft_spectrogram(snaps, window_len=8, hop=4)
    path = tmp_path / "spec.csv"
    write_spectrogram_csv(path, spec)
    back = read_spectrogram_csv(path)
    assert back.window_len == spec.window_len
    assert back.hop == spec.hop
    assert back.interval_s == spec.interval_s
    assert back.window == spec.window
    assert np.array_equal(back.times_s, spec.times_s)
    assert np.array_equal(back.doppler_hz, spec.doppler_hz)
    assert np.array_equal(back.power, spec.power)
