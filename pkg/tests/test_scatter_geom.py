"""Single-bounce geometry and the radar-equation amplitude/RCS pair."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gesturechan.scatter_geom import (
    MpcEstimate,
    RfConfig,
    ScatteringPoint,
    amplitude_from_rcs,
    mpc_to_point,
    point_to_mpc,
    rcs_from_amplitude,
    read_mpc_csv,
    write_mpc_csv,
)

C0 = 299792458.0


def test_monostatic_delay_is_round_trip(rf):
    p = ScatteringPoint(position=np.array(rf.tx_position) + [1.0, 0.0, 0.0], rcs_m2=1.0)
    est = point_to_mpc(p, rf)
    assert est.delay_s == pytest.approx(2.0 / C0, rel=1e-15)


def test_radar_gain_closed_form(rf):
    # c0^2 sigma / ((4 pi)^3 fc^2 d^4) at sigma=1 m^2, d=1 m, fc=28.5 GHz
    assert amplitude_from_rcs(1.0, 1.0, rf) == pytest.approx(5.57599138081849e-08, rel=1e-14)
    assert amplitude_from_rcs(0.02, 1.5, rf) == pytest.approx(2.2028607924221196e-10, rel=1e-14)


def test_radar_gain_input_validation(rf):
    with pytest.raises(ValueError):
        amplitude_from_rcs(1.0, 0.0, rf)
    with pytest.raises(ValueError):
        amplitude_from_rcs(-1.0, 1.0, rf)


@given(
    st.floats(1e-6, 1e3),  # |alpha| (linear amplitude)
    st.floats(0.05, 20.0),  # distance
)
def test_rcs_amplitude_inverse_pair(amp, d):
    rf = RfConfig()
    sigma = rcs_from_amplitude(amp, d, rf)
    assert sigma > 0
    # forward map returns |alpha|^2
    assert amplitude_from_rcs(sigma, d, rf) == pytest.approx(amp * amp, rel=1e-10)


@given(
    st.floats(-math.pi, math.pi),
    st.floats(-1.2, 1.2),
    st.floats(0.1, 8.0),
    st.floats(1e-5, 10.0),
)
def test_point_mpc_identity(az, el, dist, rcs):
    rf = RfConfig()
    direction = np.array(
        [
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ]
    )
    p = ScatteringPoint(position=np.asarray(rf.tx_position) + dist * direction, rcs_m2=rcs)
    back = mpc_to_point(point_to_mpc(p, rf), rf)
    assert np.allclose(back.position, p.position, atol=1e-9)
    assert back.rcs_m2 == pytest.approx(p.rcs_m2, rel=1e-9)


def test_mpc_to_point_rejects_noncausal(rf):
    with pytest.raises(ValueError):
        mpc_to_point(MpcEstimate(delay_s=0.0, azimuth_rad=0.0, elevation_rad=0.0, amplitude=1.0), rf)


def test_mpc_csv_round_trip(tmp_path, rf, rng):
    ests = []
    for i in range(25):
        p = ScatteringPoint(
            position=np.asarray(rf.tx_position) + rng.uniform(0.3, 3.0, size=3),
            rcs_m2=float(rng.uniform(1e-4, 1.0)),
            snapshot=i // 5,
        )
        ests.append(point_to_mpc(p, rf))
    path = tmp_path / "mpc.csv"
    write_mpc_csv(path, ests, interval_s=0.0026)
    back = read_mpc_csv(path)
    assert len(back) == len(ests)
    for a, b in zip(ests, back):
        assert b.snapshot == a.snapshot
        assert b.delay_s == pytest.approx(a.delay_s, rel=1e-12)
        assert b.azimuth_rad == pytest.approx(a.azimuth_rad, abs=1e-12)
        assert b.elevation_rad == pytest.approx(a.elevation_rad, abs=1e-12)
        assert b.amplitude == pytest.approx(a.amplitude, rel=1e-12)


def test_mpc_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_mpc_csv(path)
