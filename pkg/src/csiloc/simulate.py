"""Synthetic multipath CSI for a rectangular room.

Per subcarrier i at frequency f_i, each propagation path of length d
contributes  a * (c/f_i) / (4*pi*d) * exp(-j*2*pi*f_i*d/c)  to the channel
gain: free-space amplitude and the phase of the path delay d/c. The direct
path carries any obstacle loss; first-order wall reflections enter through
mirror images of the transmitter scaled by the wall reflectivity. On top of
that deterministic channel each packet gets complex AWGN at the configured
SNR and, when enabled, one global phase offset drawn uniformly from
[-pi, pi), the way unsynchronized receiver oscillators rotate a whole
packet at once.

Geometry is 2D (floor-plan coordinates, meters). Each AP carries a
3-element line array along x with half-wavelength spacing, center element
on the AP position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .records import ApPackets, CsiSession

C = 299_792_458.0  # free-space speed of light, m/s

# 30 usable subcarrier indices of a 20 MHz OFDM channel, spanning -28..+28
# with the denser packing near the band center that CSI tools report.
SUBCARRIER_INDICES = np.array(
    [-28, -26, -24, -22, -20, -18, -16, -14, -12, -10, -8, -6, -4, -2, -1,
     1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 28],
    dtype=np.int64,
)

MIN_PATH_M = 1e-3  # distance clamp so a target on top of an antenna stays finite


@dataclass
class RoomSpec:
    """Rectangular room, corners (0, 0) and (width, height)."""

    width: float
    height: float
    wall_reflectivity: float = 0.3
    obstacle_extra_loss_db: float = 0.0


@dataclass
class TrajectorySpec:
    kind: str = "waypoint-curve"  # stationary | linear | waypoint-curve
    speed_mps: float = 0.5
    duration_s: float = 60.0
    start: tuple[float, float] | None = None  # stationary and linear
    end: tuple[float, float] | None = None  # linear only
    n_waypoints: int = 6  # waypoint-curve only


@dataclass
class SimConfig:
    aps: list[tuple[float, float]] = field(default_factory=list)
    carrier_hz: float = 5.32e9
    subcarrier_spacing_hz: float = 312.5e3
    packet_rate_hz: float = 500.0
    snr_db: float | None = 30.0  # None disables noise
    phase_offsets: bool = True
    max_reflections: int = 1  # 0 = free space, 1 = single wall bounce
    ap_stagger_s: float = 0.0002  # fixed per-AP clock offset between streams


def subcarrier_frequencies(sim: SimConfig) -> np.ndarray:
    """(30,) absolute subcarrier frequencies in Hz."""
    return sim.carrier_hz + SUBCARRIER_INDICES * sim.subcarrier_spacing_hz


def antenna_positions(ap_xy, sim: SimConfig) -> np.ndarray:
    """(3, 2) element positions: half-wavelength line array centered on the AP."""
    lam = C / sim.carrier_hz
    ap = np.asarray(ap_xy, np.float64)
    offsets = np.array([[-lam / 2, 0.0], [0.0, 0.0], [lam / 2, 0.0]])
    return ap + offsets


class _Path:
    """Arc-length parameterized closed or reflecting path, evaluable at any t."""

    def __init__(self, knots: np.ndarray, speed: float, reflect: bool):
        self.knots = np.asarray(knots, np.float64)
        seg = np.diff(self.knots, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.total = float(self.s[-1])
        self.speed = float(speed)
        self.reflect = reflect

    def at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, np.float64)
        if self.total == 0.0:
            return np.broadcast_to(self.knots[0], t.shape + (2,)).copy()
        s = self.speed * t
        if self.reflect:
            s = s % (2.0 * self.total)
            s = np.where(s > self.total, 2.0 * self.total - s, s)
        else:
            s = s % self.total
        x = np.interp(s, self.s, self.knots[:, 0])
        y = np.interp(s, self.s, self.knots[:, 1])
        return np.stack([x, y], axis=-1)


def _require_inside(room: RoomSpec, xy, what: str) -> np.ndarray:
    p = np.asarray(xy, np.float64)
    if not (
        np.isfinite(p).all()
        and (p[..., 0] >= 0).all()
        and (p[..., 0] <= room.width).all()
        and (p[..., 1] >= 0).all()
        and (p[..., 1] <= room.height).all()
    ):
        raise ConfigError(f"{what} {xy} outside room {room.width} x {room.height}")
    return p


def build_path(traj: TrajectorySpec, room: RoomSpec, seed) -> _Path:
    """Deterministic path evaluator for a trajectory spec."""
    if traj.kind == "stationary":
        start = traj.start if traj.start is not None else (room.width / 2, room.height / 2)
        p = _require_inside(room, start, "start")
        return _Path(np.array([p, p]), 0.0, reflect=False)
    if traj.kind == "linear":
        if traj.start is None or traj.end is None:
            raise ConfigError("linear trajectory needs start and end")
        a = _require_inside(room, traj.start, "start")
        b = _require_inside(room, traj.end, "end")
        return _Path(np.array([a, b]), traj.speed_mps, reflect=True)
    if traj.kind == "waypoint-curve":
        if traj.n_waypoints < 3:
            raise ConfigError("waypoint-curve needs at least 3 waypoints")
        rng = np.random.default_rng(seed)
        m = 0.05 * np.array([room.width, room.height])
        pts = m + rng.uniform(0, 1, (traj.n_waypoints, 2)) * (
            np.array([room.width, room.height]) - 2 * m
        )
        loop = np.vstack([pts, pts[:1]])
        # resample to fixed resolution and circularly smooth, so the curve is
        # identical no matter what rate it is later sampled at
        coarse = _Path(loop, 1.0, reflect=False)
        s = np.linspace(0, coarse.total, 2048, endpoint=False)
        fine = coarse.at(s / 1.0)
        w = 101
        kernel = np.ones(w) / w
        padded = np.vstack([fine[-(w // 2):], fine, fine[: w // 2]])
        smooth = np.stack(
            [np.convolve(padded[:, k], kernel, mode="valid") for k in range(2)], axis=1
        )
        smooth = np.clip(smooth, [0, 0], [room.width, room.height])
        return _Path(np.vstack([smooth, smooth[:1]]), traj.speed_mps, reflect=False)
    raise ConfigError(f"unknown trajectory kind {traj.kind!r}")


def sample_track(
    traj: TrajectorySpec, room: RoomSpec, rate_hz: float, seed, duration_s=None
):
    """Ground-truth fixes on the exact grid t = k / rate_hz.

    Returns (t, xy): (n,) float64 and (n, 2) float64, n = floor(duration * rate).
    """
    duration = traj.duration_s if duration_s is None else duration_s
    if rate_hz <= 0 or duration <= 0:
        raise ConfigError("track rate and duration must be positive")
    path = build_path(traj, room, seed)
    n = int(math.floor(duration * rate_hz))
    t = np.arange(n, dtype=np.float64) / rate_hz
    xy = np.clip(path.at(t), [0, 0], [room.width, room.height])
    return t, xy


def _path_terms(positions: np.ndarray, room: RoomSpec, sim: SimConfig):
    """(image positions, amplitude scale) per propagation path."""
    if sim.max_reflections not in (0, 1):
        raise ConfigError("max_reflections supports only 0 or 1")
    direct_scale = 10.0 ** (-room.obstacle_extra_loss_db / 20.0)
    terms = [(positions, direct_scale)]
    if sim.max_reflections >= 1 and room.wall_reflectivity > 0:
        x, y = positions[..., 0], positions[..., 1]
        for img in (
            np.stack([-x, y], axis=-1),
            np.stack([2 * room.width - x, y], axis=-1),
            np.stack([x, -y], axis=-1),
            np.stack([x, 2 * room.height - y], axis=-1),
        ):
            terms.append((img, room.wall_reflectivity))
    return terms


def channel_gains(
    positions: np.ndarray, ap_xy, room: RoomSpec, sim: SimConfig, freqs=None
) -> np.ndarray:
    """Noiseless channel for one AP: (n, 3, 30) complex128 for (n, 2) positions."""
    if freqs is None:
        freqs = subcarrier_frequencies(sim)
    positions = np.asarray(positions, np.float64)
    ants = antenna_positions(ap_xy, sim)
    h = np.zeros((len(positions), 3, len(freqs)), np.complex128)
    for img, scale in _path_terms(positions, room, sim):
        d = np.linalg.norm(img[:, None, :] - ants[None, :, :], axis=-1)
        d = np.maximum(d, MIN_PATH_M)[:, :, None]
        amp = scale * (C / freqs) / (4.0 * np.pi * d)
        h += amp * np.exp(-2j * np.pi * freqs * d / C)
    return h


def channel_response(pos, room: RoomSpec, sim: SimConfig) -> np.ndarray:
    """Noiseless snapshot at one position: (ap_count, 3, 30) complex128."""
    p = np.asarray(pos, np.float64)[None, :]
    return np.stack(
        [channel_gains(p, ap, room, sim)[0] for ap in sim.aps], axis=0
    )


def simulate_session(
    room: RoomSpec,
    traj: TrajectorySpec,
    sim: SimConfig,
    session_id: str,
    seed,
    duration_s=None,
    fix_rate_hz: float = 30.0,
    chunk: int = 4096,
) -> CsiSession:
    """One full recording: ground-truth track plus per-AP CSI packet streams.

    Derives independent RNG streams for the trajectory, each AP's noise and
    each AP's phase offsets, so toggling phase_offsets or snr_db never
    shifts what the other streams draw.
    """
    if not sim.aps:
        raise ConfigError("sim.aps must list at least one AP position")
    for ap in sim.aps:
        _require_inside(room, ap, "AP")
    duration = traj.duration_s if duration_s is None else duration_s
    n_aps = len(sim.aps)
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(1 + 2 * n_aps)
    path = build_path(traj, room, children[0])

    n_fix = int(math.floor(duration * fix_rate_hz))
    track_t = np.arange(n_fix, dtype=np.float64) / fix_rate_hz
    track_xy = np.clip(path.at(track_t), [0, 0], [room.width, room.height])

    freqs = subcarrier_frequencies(sim)
    n_pkt = int(math.floor(duration * sim.packet_rate_hz))
    packets: dict[int, ApPackets] = {}
    for ap_id, ap_xy in enumerate(sim.aps):
        t = np.arange(n_pkt, dtype=np.float64) / sim.packet_rate_hz + ap_id * sim.ap_stagger_s
        rng_noise = np.random.default_rng(children[1 + ap_id])
        rng_phase = np.random.default_rng(children[1 + n_aps + ap_id])
        gains = np.empty((n_pkt, 3, len(freqs)), np.complex64)
        for lo in range(0, n_pkt, chunk):
            hi = min(lo + chunk, n_pkt)
            pos = np.clip(path.at(t[lo:hi]), [0, 0], [room.width, room.height])
            h = channel_gains(pos, ap_xy, room, sim, freqs)
            if sim.snr_db is not None:
                p_sig = np.mean(np.abs(h) ** 2, axis=(1, 2), keepdims=True)
                sigma = np.sqrt(p_sig * 10.0 ** (-sim.snr_db / 10.0) / 2.0)
                # (re, im) drawn per element so the stream does not depend on chunk
                z = rng_noise.standard_normal(h.shape + (2,))
                h = h + sigma * (z[..., 0] + 1j * z[..., 1])
            if sim.phase_offsets:
                phi = rng_phase.uniform(-np.pi, np.pi, hi - lo)
                h = h * np.exp(1j * phi)[:, None, None]
            gains[lo:hi] = h.astype(np.complex64)
        packets[ap_id] = ApPackets(t=t, gains=gains)

    return CsiSession(
        session_id=session_id,
        ap_count=n_aps,
        packet_rate_hz=float(np.float32(sim.packet_rate_hz)),
        track_t=track_t,
        track_xy=track_xy.astype(np.float32),
        packets=packets,
    )
