"""CSI session container and the CSIR1 portable binary format.

Wire layout, all little-endian:

    magic      4 bytes   b"CSIR"
    version    u16       1
    id_len     u16       byte length of session_id
    session_id id_len    UTF-8
    ap_count   u8
    rx_ant     u8        always 3
    subc       u8        always 30
    rate       f32       packet rate of each AP stream, Hz
    reserved   16 bytes  zeros
    track block:   count u32, then count * (t f64, x f32, y f32)
    packet block:  count u32, then count * (t f64, ap_id u8,
                   3*30 gains as (re f32, im f32) pairs,
                   antenna-major, subcarrier ascending)

Packets from all APs are stored merged, sorted by (t, ap_id). The parser
rejects any other ordering; together with the all-fields-finite rule this
is what makes write(parse(b)) == b bit-exact, not just value-equal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CsilocError

MAGIC = b"CSIR"
VERSION = 1
RX_ANTENNAS = 3
SUBCARRIERS = 30

# Packed layouts; numpy structured dtypes add no padding by default.
TRACK_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4")])
PACKET_DTYPE = np.dtype(
    [("t", "<f8"), ("ap", "u1"), ("g", "<c8", (RX_ANTENNAS, SUBCARRIERS))]
)
HEADER_FMT = "<4sHH"  # magic, version, id_len


class CsirError(CsilocError, ValueError):
    """Base class for everything the CSIR1 reader/writer can reject."""


class CsirTruncated(CsirError):
    """Buffer ends before a field or block it promised."""


class CsirBadMagic(CsirError):
    """First four bytes are not b'CSIR'."""


class CsirBadVersion(CsirError):
    """Version word is not 1."""


class CsirFieldError(CsirError):
    """A field holds a value the format forbids."""


@dataclass
class ApPackets:
    """One AP's packet stream: t is (n,) float64, gains is (n, 3, 30) complex64."""

    t: np.ndarray
    gains: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def empty_stream() -> ApPackets:
    return ApPackets(
        t=np.empty(0, np.float64),
        gains=np.empty((0, RX_ANTENNAS, SUBCARRIERS), np.complex64),
    )


@dataclass
class CsiSession:
    """A recording session: ground-truth track plus per-AP CSI packet streams."""

    session_id: str
    ap_count: int
    packet_rate_hz: float
    track_t: np.ndarray = field(default_factory=lambda: np.empty(0, np.float64))
    track_xy: np.ndarray = field(default_factory=lambda: np.empty((0, 2), np.float32))
    packets: dict[int, ApPackets] = field(default_factory=dict)

    rx_antennas: int = RX_ANTENNAS
    subcarriers: int = SUBCARRIERS

    def stream(self, ap_id: int) -> ApPackets:
        return self.packets.get(ap_id, empty_stream())

    def packet_count(self) -> int:
        return sum(len(s) for s in self.packets.values())

    def validate(self) -> None:
        """Raise CsirFieldError on anything the wire format could not carry back."""
        if not 1 <= self.ap_count <= 255:
            raise CsirFieldError(f"ap_count {self.ap_count} outside u8 range [1, 255]")
        if self.rx_antennas != RX_ANTENNAS or self.subcarriers != SUBCARRIERS:
            raise CsirFieldError("format is fixed at 3 rx antennas and 30 subcarriers")
        if len(self.session_id.encode("utf-8")) > 0xFFFF:
            raise CsirFieldError("session_id exceeds u16 byte length")
        _check_f32_exact("packet_rate_hz", np.asarray([self.packet_rate_hz]))
        if not (np.isfinite(self.packet_rate_hz) and self.packet_rate_hz > 0):
            raise CsirFieldError(f"packet_rate_hz {self.packet_rate_hz} not finite positive")

        tt = np.asarray(self.track_t, np.float64)
        xy = np.asarray(self.track_xy, np.float32)
        if xy.shape != (len(tt), 2):
            raise CsirFieldError("track_xy must be (len(track_t), 2)")
        if not np.isfinite(tt).all() or not np.isfinite(xy).all():
            raise CsirFieldError("track contains non-finite values")
        if len(tt) > 1 and not (np.diff(tt) > 0).all():
            raise CsirFieldError("track timestamps must be strictly increasing")
        _check_f32_exact("track_xy", xy)

        for ap_id, s in self.packets.items():
            if not 0 <= ap_id < self.ap_count:
                raise CsirFieldError(f"ap_id {ap_id} outside [0, {self.ap_count})")
            if s.gains.shape != (len(s.t), RX_ANTENNAS, SUBCARRIERS):
                raise CsirFieldError(f"ap {ap_id}: gains shape {s.gains.shape} mismatched")
            if len(s.t):
                if not np.isfinite(s.t).all() or s.t[0] < 0:
                    raise CsirFieldError(f"ap {ap_id}: timestamps must be finite and >= 0")
                if not (np.diff(s.t) >= 0).all():
                    raise CsirFieldError(f"ap {ap_id}: timestamps must be non-decreasing")
                if not np.isfinite(s.gains).all():
                    raise CsirFieldError(f"ap {ap_id}: non-finite gains")

    def equals(self, other: "CsiSession") -> bool:
        """Field-for-field equality, array contents included."""
        if (
            self.session_id != other.session_id
            or self.ap_count != other.ap_count
            or self.packet_rate_hz != other.packet_rate_hz
        ):
            return False
        if not np.array_equal(self.track_t, other.track_t):
            return False
        if not np.array_equal(self.track_xy, other.track_xy):
            return False
        aps = {a for a, s in self.packets.items() if len(s)}
        if aps != {a for a, s in other.packets.items() if len(s)}:
            return False
        for ap_id in aps:
            a, b = self.packets[ap_id], other.packets[ap_id]
            if not np.array_equal(a.t, b.t) or not np.array_equal(a.gains, b.gains):
                return False
        return True


def _check_f32_exact(name: str, values: np.ndarray) -> None:
    # The wire stores these as f32; wider values would not round-trip.
    v64 = np.asarray(values, np.float64)
    if not np.array_equal(v64, v64.astype(np.float32).astype(np.float64)):
        raise CsirFieldError(f"{name} holds values not representable as float32")


def write_session(session: CsiSession) -> bytes:
    """Serialize to CSIR1 bytes. Validates first; never emits an unparseable buffer."""
    session.validate()
    idb = session.session_id.encode("utf-8")
    out = [
        struct.pack(HEADER_FMT, MAGIC, VERSION, len(idb)),
        idb,
        struct.pack(
            "<BBBf",
            session.ap_count,
            RX_ANTENNAS,
            SUBCARRIERS,
            session.packet_rate_hz,
        ),
        b"\x00" * 16,
    ]

    track = np.empty(len(session.track_t), TRACK_DTYPE)
    track["t"] = session.track_t
    track["x"] = np.asarray(session.track_xy, np.float32)[:, 0] if len(track) else []
    track["y"] = np.asarray(session.track_xy, np.float32)[:, 1] if len(track) else []
    out.append(struct.pack("<I", len(track)))
    out.append(track.tobytes())

    n_total = session.packet_count()
    merged = np.empty(n_total, PACKET_DTYPE)
    pos = 0
    for ap_id in sorted(session.packets):
        s = session.packets[ap_id]
        merged["t"][pos : pos + len(s)] = s.t
        merged["ap"][pos : pos + len(s)] = ap_id
        merged["g"][pos : pos + len(s)] = s.gains.astype(np.complex64, copy=False)
        pos += len(s)
    # lexsort is stable, so equal (t, ap) keeps per-stream order.
    order = np.lexsort((merged["ap"], merged["t"]))
    merged = merged[order]
    out.append(struct.pack("<I", n_total))
    out.append(merged.tobytes())
    return b"".join(out)


def parse_session(buf: bytes) -> CsiSession:
    """Parse CSIR1 bytes; raises a CsirError subclass on every malformed input."""
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if len(buf) - off < n:
            raise CsirTruncated(f"need {n} bytes for {what}, have {len(buf) - off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    magic, version, id_len = struct.unpack(HEADER_FMT, take(8, "header"))
    if magic != MAGIC:
        raise CsirBadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise CsirBadVersion(f"version {version}")
    try:
        session_id = take(id_len, "session_id").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CsirFieldError(f"session_id is not UTF-8: {e}") from None
    ap_count, rx, subc, rate = struct.unpack("<BBBf", take(7, "counts"))
    if ap_count < 1:
        raise CsirFieldError("ap_count must be >= 1")
    if rx != RX_ANTENNAS or subc != SUBCARRIERS:
        raise CsirFieldError(f"fixed-geometry fields rx={rx} subc={subc}, expected 3/30")
    if not (np.isfinite(rate) and rate > 0):
        raise CsirFieldError(f"packet_rate_hz {rate} not finite positive")
    if take(16, "reserved") != b"\x00" * 16:
        raise CsirFieldError("reserved bytes must be zero")

    (n_track,) = struct.unpack("<I", take(4, "track count"))
    track = np.frombuffer(
        take(n_track * TRACK_DTYPE.itemsize, "track block"), TRACK_DTYPE
    )
    track_t = track["t"].astype(np.float64)
    track_xy = np.stack([track["x"], track["y"]], axis=1) if n_track else np.empty((0, 2), np.float32)
    if not np.isfinite(track_t).all() or not np.isfinite(track_xy).all():
        raise CsirFieldError("track contains non-finite values")
    if n_track > 1 and not (np.diff(track_t) > 0).all():
        raise CsirFieldError("track timestamps must be strictly increasing")

    (n_pkt,) = struct.unpack("<I", take(4, "packet count"))
    raw = np.frombuffer(take(n_pkt * PACKET_DTYPE.itemsize, "packet block"), PACKET_DTYPE)
    if off != len(buf):
        raise CsirFieldError(f"{len(buf) - off} trailing bytes after packet block")

    t = raw["t"].astype(np.float64)
    ap = raw["ap"].astype(np.int64)
    if n_pkt:
        if ap.max() >= ap_count:
            raise CsirFieldError("packet ap_id outside [0, ap_count)")
        if not np.isfinite(t).all() or t[0] < 0 or t.min() < 0:
            raise CsirFieldError("packet timestamps must be finite and >= 0")
        dt = np.diff(t)
        if not ((dt > 0) | ((dt == 0) & (np.diff(ap) >= 0))).all():
            raise CsirFieldError("packets must be sorted by (t, ap_id)")
        if not np.isfinite(raw["g"]).all():
            raise CsirFieldError("non-finite channel gains")

    packets: dict[int, ApPackets] = {}
    for ap_id in range(ap_count):
        mask = ap == ap_id
        if mask.any():
            packets[ap_id] = ApPackets(t=t[mask].copy(), gains=raw["g"][mask].copy())
    return CsiSession(
        session_id=session_id,
        ap_count=ap_count,
        packet_rate_hz=rate,
        track_t=track_t,
        track_xy=track_xy,
        packets=packets,
    )


def save_session(path, session: CsiSession) -> None:
    with open(path, "wb") as f:
        f.write(write_session(session))


def load_session(path) -> CsiSession:
    with open(path, "rb") as f:
        return parse_session(f.read())


@dataclass
class AlignedCsi:
    """Time-aligned per-packet CSI across all APs.

    t is the anchor (AP 0) timestamp of each triple, gains is
    (n, ap_count, 3, 30) complex64.
    """

    t: np.ndarray
    gains: np.ndarray


def align_streams(session: CsiSession, tolerance_s: float = 0.002) -> AlignedCsi:
    """Match each AP-0 packet with the nearest packet of every other AP.

    An anchor survives only if every AP has a packet within tolerance_s of
    it and no packet is claimed twice (first anchor wins). Ties between two
    equidistant candidates go to the earlier packet. The timestamp span of
    a matched group is therefore at most 2 * tolerance_s.
    """
    anchor = session.stream(0)
    n = len(anchor)
    keep = np.ones(n, bool)
    chosen = {0: np.arange(n)}
    for ap_id in range(1, session.ap_count):
        s = session.stream(ap_id)
        if len(s) == 0:
            return AlignedCsi(
                t=np.empty(0, np.float64),
                gains=np.empty((0, session.ap_count, RX_ANTENNAS, SUBCARRIERS), np.complex64),
            )
        right = np.searchsorted(s.t, anchor.t)
        left = np.clip(right - 1, 0, len(s) - 1)
        right = np.clip(right, 0, len(s) - 1)
        d_left = np.abs(anchor.t - s.t[left])
        d_right = np.abs(s.t[right] - anchor.t)
        idx = np.where(d_left <= d_right, left, right)  # tie -> earlier packet
        best = np.minimum(d_left, d_right)
        ok = best <= tolerance_s
        keep &= ok
        # First in-tolerance anchor wins a contested packet; anchors already
        # out of tolerance get unique sentinels so they cannot claim one.
        claim = np.where(ok, idx, len(s) + np.arange(n))
        _, first = np.unique(claim, return_index=True)
        contested = np.ones(n, bool)
        contested[first] = False
        keep &= ~contested
        chosen[ap_id] = idx

    rows = np.nonzero(keep)[0]
    gains = np.empty((len(rows), session.ap_count, RX_ANTENNAS, SUBCARRIERS), np.complex64)
    for ap_id in range(session.ap_count):
        gains[:, ap_id] = session.stream(ap_id).gains[chosen[ap_id][rows]]
    return AlignedCsi(t=anchor.t[rows].copy(), gains=gains)
