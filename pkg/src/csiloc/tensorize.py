"""From aligned CSI streams to training tensors.

A sample covers 25 consecutive aligned packet groups. Its rows are
packet-major, antenna-minor (row = 3 * packet + antenna, 75 rows), columns
are the 30 subcarriers, and the 6 channels interleave (amplitude, phase)
per AP: channel 2*ap is amplitude, 2*ap + 1 is phase. Amplitudes are
20*log10(|H| + 1e-12), later min-max normalized with constants taken from
the training split alone. Phases are unwrapped over the subcarrier index,
have their least-squares linear trend removed, and are re-wrapped to
[-pi, pi); that cancels the per-packet global rotation and any residual
linear-in-frequency term from timing offsets, which carry no position
information.

The position label is the ground-truth track interpolated at the mean
anchor timestamp of the window.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .records import AlignedCsi, CsiSession, align_streams
from .simulate import SUBCARRIER_INDICES

WINDOW = 25
AMP_FLOOR = 1e-12

# least-squares projector for the linear trend over subcarrier index
_DESIGN = np.stack([SUBCARRIER_INDICES.astype(np.float64), np.ones(30)], axis=1)
_PROJ = np.linalg.pinv(_DESIGN)


def amplitude_db(gains: np.ndarray) -> np.ndarray:
    mag = np.abs(np.asarray(gains).astype(np.complex128))
    return 20.0 * np.log10(mag + AMP_FLOOR)


def sanitize_phase(raw: np.ndarray) -> np.ndarray:
    """Detrend raw phases over the subcarrier axis (last, length 30).

    Adding a constant offset or a linear-in-index ramp (moderate slope)
    to the input changes the output only at float precision.
    """
    unwrapped = np.unwrap(np.asarray(raw, np.float64), axis=-1)
    coef = unwrapped @ _PROJ.T
    detrended = unwrapped - coef @ _DESIGN.T
    return np.mod(detrended + np.pi, 2.0 * np.pi) - np.pi


def window_samples(aligned: AlignedCsi, track_t, track_xy):
    """Cut non-overlapping 25-group windows into raw (unnormalized) samples.

    Returns (X, y, t_center): X is (n, 75, 30, 2 * ap_count) float32 with
    dB amplitudes, y is (n, 2) float32, t_center is (n,) float64.
    """
    n_group, n_ap = aligned.gains.shape[:2]
    n_win = n_group // WINDOW
    if n_win == 0:
        raise ConfigError(f"need at least {WINDOW} aligned groups, have {n_group}")
    track_t = np.asarray(track_t, np.float64)
    track_xy = np.asarray(track_xy, np.float64)
    if len(track_t) == 0:
        raise ConfigError("session has no ground-truth track to label from")

    g = aligned.gains[: n_win * WINDOW]
    amp = amplitude_db(g)
    phase = sanitize_phase(np.angle(g.astype(np.complex128)))
    # (w, 25, ap, ant, 30) -> rows packet-major antenna-minor -> (w, 75, 30, ap)
    amp = amp.reshape(n_win, WINDOW, n_ap, 3, 30).transpose(0, 1, 3, 4, 2)
    phase = phase.reshape(n_win, WINDOW, n_ap, 3, 30).transpose(0, 1, 3, 4, 2)
    X = np.empty((n_win, 75, 30, 2 * n_ap), np.float32)
    X[..., 0::2] = amp.reshape(n_win, 75, 30, n_ap)
    X[..., 1::2] = phase.reshape(n_win, 75, 30, n_ap)

    t_center = aligned.t[: n_win * WINDOW].reshape(n_win, WINDOW).mean(axis=1)
    y = np.stack(
        [np.interp(t_center, track_t, track_xy[:, 0]),
         np.interp(t_center, track_t, track_xy[:, 1])],
        axis=1,
    ).astype(np.float32)
    return X, y, t_center


def amp_range(X: np.ndarray) -> tuple[float, float]:
    """Normalization constants (lo, hi) from one split's amplitude channels."""
    a = X[..., 0::2]
    lo, hi = float(a.min()), float(a.max())
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ConfigError(f"degenerate amplitude range [{lo}, {hi}]")
    return lo, hi


def normalize_amplitudes(X: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map of amplitude channels to [0, 1], clipped; phases untouched."""
    out = X.copy()
    out[..., 0::2] = np.clip((X[..., 0::2] - lo) / (hi - lo), 0.0, 1.0)
    return out


def split_sessions(session_ids: list[str], fold: int):
    """Rotation split: test = ids[fold], val = next id, train = the rest.

    With exactly two sessions there is no third group to hold out, so the
    held-out session doubles as both validation and test (reduced mode for
    quick runs). Fewer than two sessions cannot be split at all.
    """
    n = len(session_ids)
    if n < 2:
        raise ConfigError(f"need at least 2 sessions to split, have {n}")
    if not 0 <= fold < n:
        raise ConfigError(f"fold {fold} outside [0, {n})")
    if n == 2:
        held = session_ids[fold]  # fold still names the test session
        return [session_ids[(fold + 1) % 2]], [held], [held]
    test = [session_ids[fold]]
    val = [session_ids[(fold + 1) % n]]
    train = [s for s in session_ids if s not in test + val]
    return train, val, test


@dataclass
class Dataset:
    """One fold's tensors, amplitudes already normalized."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    amp_min: float
    amp_max: float
    fold: int
    split_ids: dict[str, list[str]]

    def summary(self) -> str:
        return (
            f"fold {self.fold}: train {len(self.X_train)}, val {len(self.X_val)}, "
            f"test {len(self.X_test)} samples, amp range "
            f"[{self.amp_min:.2f}, {self.amp_max:.2f}] dB"
        )


def build_fold(
    sessions: list[CsiSession], fold: int, tolerance_s: float = 0.002
) -> Dataset:
    """Align, window and normalize a list of sessions into one fold's dataset."""
    ids = [s.session_id for s in sessions]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate session ids")
    train_ids, val_ids, test_ids = split_sessions(ids, fold)
    per_session = {}
    for s in sessions:
        X, y, _ = window_samples(align_streams(s, tolerance_s), s.track_t, s.track_xy)
        if X.shape[-1] != 6:
            raise ConfigError(f"expected 3 APs (6 channels), got {X.shape[-1] // 2}")
        per_session[s.session_id] = (X, y)

    def stack(which):
        X = np.concatenate([per_session[i][0] for i in which])
        y = np.concatenate([per_session[i][1] for i in which])
        return X, y

    X_train, y_train = stack(train_ids)
    X_val, y_val = stack(val_ids)
    X_test, y_test = stack(test_ids)
    lo, hi = amp_range(X_train)
    return Dataset(
        X_train=normalize_amplitudes(X_train, lo, hi),
        y_train=y_train,
        X_val=normalize_amplitudes(X_val, lo, hi),
        y_val=y_val,
        X_test=normalize_amplitudes(X_test, lo, hi),
        y_test=y_test,
        amp_min=lo,
        amp_max=hi,
        fold=fold,
        split_ids={"train": train_ids, "val": val_ids, "test": test_ids},
    )


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ["train", "val", "test"]:
        np.save(out / f"X_{name}.npy", getattr(ds, f"X_{name}"))
        np.save(out / f"y_{name}.npy", getattr(ds, f"y_{name}"))
    manifest = {
        "format": "csiloc-dataset",
        "version": 1,
        "window": WINDOW,
        "fold": ds.fold,
        "splits": ds.split_ids,
        "amp_min": ds.amp_min,
        "amp_max": ds.amp_max,
        "counts": {
            "train": len(ds.X_train),
            "val": len(ds.X_val),
            "test": len(ds.X_test),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{src} has no manifest.json") from None
    if manifest.get("format") != "csiloc-dataset":
        raise ConfigError(f"{src} is not a dataset directory")
    arrays = {}
    for name in ["train", "val", "test"]:
        arrays[f"X_{name}"] = np.load(src / f"X_{name}.npy")
        arrays[f"y_{name}"] = np.load(src / f"y_{name}.npy")
    return Dataset(
        amp_min=manifest["amp_min"],
        amp_max=manifest["amp_max"],
        fold=manifest["fold"],
        split_ids=manifest["splits"],
        **arrays,
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
