import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import mutate, random_session
from csiloc.records import (
    PACKET_DTYPE,
    ApPackets,
    CsiSession,
    CsirBadMagic,
    CsirBadVersion,
    CsirError,
    CsirFieldError,
    CsirTruncated,
    align_streams,
    parse_session,
    write_session,
)


def empty_session(session_id="lab-A"):
    return CsiSession(session_id=session_id, ap_count=3, packet_rate_hz=500.0)


def test_degenerate_session_size():
    # magic 4 + version 2 + id_len 2 + id + ap/rx/subc 3 + rate 4
    # + reserved 16 + track count 4 + packet count 4
    for sid in ["", "lab-A", "a" * 40]:
        buf = write_session(empty_session(sid))
        assert len(buf) == 39 + len(sid.encode("utf-8"))


def test_known_bytes_oracle():
    gains = (np.arange(90, dtype=np.float32) - 1j * np.ones(90, np.float32)).reshape(3, 30)
    s = CsiSession(
        session_id="s0",
        ap_count=2,
        packet_rate_hz=500.0,
        track_t=np.array([0.5]),
        track_xy=np.array([[1.25, -2.0]], np.float32),
        packets={1: ApPackets(t=np.array([0.002]), gains=gains[None].astype(np.complex64))},
    )
    expected = b"CSIR" + struct.pack("<HH", 1, 2) + b"s0"
    expected += struct.pack("<BBBf", 2, 3, 30, 500.0) + b"\x00" * 16
    expected += struct.pack("<I", 1) + struct.pack("<dff", 0.5, 1.25, -2.0)
    expected += struct.pack("<I", 1) + struct.pack("<dB", 0.002, 1)
    for k in range(90):
        expected += struct.pack("<ff", float(k), -1.0)
    assert write_session(s) == expected
    assert parse_session(expected).equals(s)


def test_round_trip_multi_ap_interleaved():
    rng = np.random.default_rng(7)
    packets = {}
    for ap_id, t0 in [(0, 0.0), (1, 0.0003), (2, 0.0007)]:
        t = t0 + np.arange(50) / 500.0
        g = (rng.standard_normal((50, 3, 30)) + 1j * rng.standard_normal((50, 3, 30)))
        packets[ap_id] = ApPackets(t=t, gains=g.astype(np.complex64))
    s = CsiSession(
        session_id="walk-01",
        ap_count=3,
        packet_rate_hz=500.0,
        track_t=np.arange(5) / 2.0 + 0.1,
        track_xy=rng.uniform(0, 4, (5, 2)).astype(np.float32),
        packets=packets,
    )
    buf = write_session(s)
    back = parse_session(buf)
    assert back.equals(s)
    assert write_session(back) == buf


def test_write_is_deterministic_under_dict_order():
    rng = np.random.default_rng(3)
    s = random_session(rng)
    while len(s.packets) < 2:
        s = random_session(rng)
    reordered = CsiSession(
        session_id=s.session_id,
        ap_count=s.ap_count,
        packet_rate_hz=s.packet_rate_hz,
        track_t=s.track_t,
        track_xy=s.track_xy,
        packets=dict(reversed(list(s.packets.items()))),
    )
    assert write_session(s) == write_session(reordered)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_randomized(seed):
    s = random_session(np.random.default_rng(seed))
    buf = write_session(s)
    back = parse_session(buf)
    assert back.equals(s)
    assert write_session(back) == buf


def valid_buf():
    rng = np.random.default_rng(11)
    return write_session(random_session(rng, max_aps=3, max_packets=10))


def test_bad_magic():
    with pytest.raises(CsirBadMagic):
        parse_session(b"XSIR" + valid_buf()[4:])


def test_bad_version():
    buf = bytearray(valid_buf())
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(CsirBadVersion):
        parse_session(bytes(buf))


def test_truncations_are_typed():
    buf = valid_buf()
    for cut in [0, 3, 7, 9, len(buf) // 2, len(buf) - 1]:
        with pytest.raises(CsirTruncated):
            parse_session(buf[:cut])


def test_reserved_must_be_zero():
    s = empty_session("x")
    buf = bytearray(write_session(s))
    buf[-20] = 1  # inside the 16 reserved bytes
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(CsirFieldError):
        parse_session(valid_buf() + b"\x00")


def test_fixed_geometry_fields_enforced():
    buf = bytearray(write_session(empty_session("g")))
    buf[10] = 2  # rx_antennas, one byte after ap_count
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_bad_rate_rejected():
    buf = bytearray(write_session(empty_session("r")))
    buf[12:16] = struct.pack("<f", float("nan"))
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))
    buf[12:16] = struct.pack("<f", 0.0)
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_non_finite_gain_rejected():
    s = empty_session("n")
    s.packets[0] = ApPackets(
        t=np.array([0.0]), gains=np.ones((1, 3, 30), np.complex64)
    )
    buf = bytearray(write_session(s))
    buf[-8:-4] = struct.pack("<f", float("inf"))
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_unsorted_packets_rejected():
    s = empty_session("u")
    g = np.ones((1, 3, 30), np.complex64)
    s.packets[0] = ApPackets(t=np.array([1.0]), gains=g)
    s.packets[1] = ApPackets(t=np.array([0.5]), gains=g)
    buf = bytearray(write_session(s))
    # swap the two packet records to break (t, ap_id) order
    rec = PACKET_DTYPE.itemsize
    start = len(buf) - 2 * rec
    buf[start : start + rec], buf[start + rec :] = (
        buf[start + rec :],
        buf[start : start + rec],
    )
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_ap_id_out_of_range_rejected():
    s = empty_session("a")
    s.packets[0] = ApPackets(t=np.array([0.0]), gains=np.ones((1, 3, 30), np.complex64))
    buf = bytearray(write_session(s))
    buf[len(buf) - PACKET_DTYPE.itemsize + 8] = 7  # ap_id byte of the only packet
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_bad_utf8_id_rejected():
    buf = bytearray(write_session(empty_session("ab")))
    buf[8] = 0xFF
    with pytest.raises(CsirFieldError):
        parse_session(bytes(buf))


def test_writer_refuses_unrepresentable_f32():
    s = empty_session("f")
    s.packet_rate_hz = 500.0000001
    with pytest.raises(CsirFieldError):
        write_session(s)


def test_writer_refuses_decreasing_track():
    s = empty_session("t")
    s.track_t = np.array([1.0, 0.5])
    s.track_xy = np.zeros((2, 2), np.float32)
    with pytest.raises(CsirFieldError):
        write_session(s)


def test_fuzz_smoke_never_crashes():
    rng = np.random.default_rng(123)
    buf = valid_buf()
    for _ in range(300):
        try:
            parse_session(mutate(buf, rng))
        except CsirError:
            pass


def regular_session(n=40, rate=500.0, offsets=(0.0, 0.0003, 0.0007)):
    rng = np.random.default_rng(5)
    packets = {}
    for ap_id, off in enumerate(offsets):
        t = off + np.arange(n) / rate
        g = (rng.standard_normal((n, 3, 30)) + 1j * rng.standard_normal((n, 3, 30)))
        packets[ap_id] = ApPackets(t=t, gains=g.astype(np.complex64))
    return CsiSession(
        session_id="reg", ap_count=len(offsets), packet_rate_hz=rate, packets=packets
    )


def test_align_regular_streams_keeps_every_anchor():
    s = regular_session(n=40)
    a = align_streams(s, tolerance_s=0.002)
    assert len(a.t) == 40
    assert a.gains.shape == (40, 3, 3, 30)
    np.testing.assert_array_equal(a.t, s.packets[0].t)
    for ap_id in range(3):
        np.testing.assert_array_equal(a.gains[:, ap_id], s.packets[ap_id].gains)


def test_align_span_bounded_by_twice_tolerance():
    rng = np.random.default_rng(9)
    packets = {}
    for ap_id in range(3):
        t = np.sort(np.arange(30) / 100.0 + rng.uniform(-0.0015, 0.0015, 30))
        t = np.maximum(t, 0)
        gains = np.zeros((30, 3, 30), np.complex64)
        gains += np.arange(1, 31, dtype=np.float32)[:, None, None]  # identifiable rows
        packets[ap_id] = ApPackets(t=t, gains=gains)
    s = CsiSession(session_id="j", ap_count=3, packet_rate_hz=100.0, packets=packets)
    tol = 0.002
    a = align_streams(s, tolerance_s=tol)
    assert len(a.t) > 20
    for i, t_anchor in enumerate(a.t):
        for ap_id in range(1, 3):
            j = int(a.gains[i, ap_id, 0, 0].real) - 1
            assert abs(s.packets[ap_id].t[j] - t_anchor) <= tol


def test_align_drops_anchor_with_no_partner():
    s = regular_session(n=10)
    keep = np.arange(10) != 4
    s.packets[1] = ApPackets(t=s.packets[1].t[keep], gains=s.packets[1].gains[keep])
    a = align_streams(s, tolerance_s=0.001)
    assert len(a.t) == 9
    assert not np.any(np.isclose(a.t, s.packets[0].t[4]))


def test_align_tie_prefers_earlier_packet():
    g = np.zeros((2, 3, 30), np.complex64)
    g[0] += 1.0
    g[1] += 2.0
    s = CsiSession(
        session_id="tie",
        ap_count=2,
        packet_rate_hz=1.0,
        packets={
            0: ApPackets(t=np.array([0.5]), gains=np.ones((1, 3, 30), np.complex64)),
            1: ApPackets(t=np.array([0.4, 0.6]), gains=g),
        },
    )
    a = align_streams(s, tolerance_s=0.2)
    assert len(a.t) == 1
    np.testing.assert_array_equal(a.gains[0, 1], g[0])


def test_align_never_reuses_a_packet():
    g4 = np.zeros((4, 3, 30), np.complex64)
    s = CsiSession(
        session_id="uniq",
        ap_count=2,
        packet_rate_hz=1.0,
        packets={
            0: ApPackets(t=np.array([0.0, 1.0, 2.0, 3.0]), gains=g4),
            1: ApPackets(t=np.array([0.5, 2.5]), gains=g4[:2]),
        },
    )
    a = align_streams(s, tolerance_s=0.6)
    np.testing.assert_array_equal(a.t, [0.0, 2.0])


def test_align_empty_partner_stream():
    s = regular_session(n=5)
    del s.packets[2]
    a = align_streams(s)
    assert len(a.t) == 0 and a.gains.shape == (0, 3, 3, 30)
