"""Experiment configuration and run logging.

Configs are strict JSON: unknown keys are rejected and defaults are
expanded before hashing, so a config hash always names a fully-resolved
experiment rather than whatever the defaults happened to be that day.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .model import ModelSpec, default_spec, tiny_spec
from .simulate import RoomSpec, SimConfig, TrajectorySpec
from .train import TrainConfig

_PAIR = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 2,
    "maxItems": 2,
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario", "room", "sim"],
    "properties": {
        "scenario": {"type": "string", "pattern": "^[A-Za-z0-9._-]+$"},
        "room": {
            "type": "object",
            "additionalProperties": False,
            "required": ["width", "height"],
            "properties": {
                "width": {"type": "number", "exclusiveMinimum": 0},
                "height": {"type": "number", "exclusiveMinimum": 0},
                "wall_reflectivity": {
                    "type": "number", "minimum": 0, "exclusiveMaximum": 1,
                },
                "obstacle_extra_loss_db": {"type": "number", "minimum": 0},
            },
        },
        "trajectory": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["stationary", "linear", "waypoint-curve"]},
                "speed_mps": {"type": "number", "exclusiveMinimum": 0},
                "duration_s": {"type": "number", "exclusiveMinimum": 0},
                "start": _PAIR,
                "end": _PAIR,
                "n_waypoints": {"type": "integer", "minimum": 2},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "required": ["aps"],
            "properties": {
                "aps": {"type": "array", "items": _PAIR, "minItems": 1},
                "carrier_hz": {"type": "number", "exclusiveMinimum": 0},
                "subcarrier_spacing_hz": {"type": "number", "exclusiveMinimum": 0},
                "packet_rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "snr_db": {"type": ["number", "null"]},
                "phase_offsets": {"type": "boolean"},
                "max_reflections": {"enum": [0, 1]},
                "ap_stagger_s": {"type": "number", "minimum": 0},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sessions": {"type": "integer", "minimum": 1},
                "align_tolerance_s": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"profile": {"enum": ["default", "tiny"]}},
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "early_stop_patience": {"type": "integer", "minimum": 1},
                "plateau_factor": {
                    "type": "number", "exclusiveMinimum": 0, "maximum": 1,
                },
                "plateau_patience": {"type": "integer", "minimum": 1},
            },
        },
        "transfer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "freeze_ks": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 0, "maximum": 27},
                    "minItems": 1,
                },
            },
        },
        "ablation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fractions": {
                    "type": "array",
                    "items": {
                        "type": "number", "minimum": 0, "exclusiveMaximum": 1,
                    },
                    "minItems": 1,
                },
            },
        },
    },
}

DEFAULTS = {
    "room": {"wall_reflectivity": 0.3, "obstacle_extra_loss_db": 0.0},
    "trajectory": {
        "kind": "waypoint-curve",
        "speed_mps": 0.5,
        "duration_s": 60.0,
        "n_waypoints": 6,
    },
    "sim": {
        "carrier_hz": 5.32e9,
        "subcarrier_spacing_hz": 312.5e3,
        "packet_rate_hz": 500.0,
        "snr_db": 30.0,
        "phase_offsets": True,
        "max_reflections": 1,
        "ap_stagger_s": 0.0002,
    },
    "dataset": {"sessions": 5, "align_tolerance_s": 0.002},
    "model": {"profile": "default"},
    "training": {
        "lr": 0.002,
        "batch_size": 30,
        "max_epochs": 200,
        "early_stop_patience": 10,
        "plateau_factor": 0.5,
        "plateau_patience": 5,
    },
    "transfer": {"freeze_ks": list(range(28))},
    "ablation": {"fractions": [round(0.05 * i, 2) for i in range(1, 20)]},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_raw(raw) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.exceptions.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "config root"
        raise ConfigError(f"invalid config at {where}: {e.message}") from e


def resolve_config(raw: dict) -> dict:
    """Validate, then expand every default the file left out."""
    validate_raw(raw)
    return _deep_merge(DEFAULTS, raw)


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    """A fully-resolved experiment: every knob explicit, hashable."""

    resolved: dict

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from e
        return ExperimentConfig(resolve_config(raw))

    @property
    def scenario(self) -> str:
        return self.resolved["scenario"]

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    @property
    def sessions(self) -> int:
        return self.resolved["dataset"]["sessions"]

    @property
    def align_tolerance_s(self) -> float:
        return self.resolved["dataset"]["align_tolerance_s"]

    @property
    def freeze_ks(self) -> list[int]:
        return list(self.resolved["transfer"]["freeze_ks"])

    @property
    def fractions(self) -> list[float]:
        return list(self.resolved["ablation"]["fractions"])

    def room(self) -> RoomSpec:
        r = self.resolved["room"]
        return RoomSpec(
            width=r["width"],
            height=r["height"],
            wall_reflectivity=r["wall_reflectivity"],
            obstacle_extra_loss_db=r["obstacle_extra_loss_db"],
        )

    def trajectory(self) -> TrajectorySpec:
        t = self.resolved["trajectory"]

        def pair(key):
            return tuple(t[key]) if key in t else None

        return TrajectorySpec(
            kind=t["kind"],
            speed_mps=t["speed_mps"],
            duration_s=t["duration_s"],
            start=pair("start"),
            end=pair("end"),
            n_waypoints=t["n_waypoints"],
        )

    def sim(self) -> SimConfig:
        s = self.resolved["sim"]
        return SimConfig(
            aps=[tuple(a) for a in s["aps"]],
            carrier_hz=s["carrier_hz"],
            subcarrier_spacing_hz=s["subcarrier_spacing_hz"],
            packet_rate_hz=s["packet_rate_hz"],
            snr_db=s["snr_db"],
            phase_offsets=s["phase_offsets"],
            max_reflections=s["max_reflections"],
            ap_stagger_s=s["ap_stagger_s"],
        )

    def model_spec(self) -> ModelSpec:
        if self.resolved["model"]["profile"] == "tiny":
            return tiny_spec()
        return default_spec()

    def train_config(self, seed: int = 0) -> TrainConfig:
        tr = self.resolved["training"]
        return TrainConfig(
            lr=tr["lr"],
            batch_size=tr["batch_size"],
            max_epochs=tr["max_epochs"],
            early_stop_patience=tr["early_stop_patience"],
            plateau_factor=tr["plateau_factor"],
            plateau_patience=tr["plateau_patience"],
            seed=seed,
        )


@dataclass
class RunRecord:
    """One training run's provenance line in runs.jsonl."""

    run_id: str
    command: str
    config_hash: str
    seed: int
    scenario: str
    fold: int
    mean_error_m: float
    epochs: int
    train_seconds: float
    trainable_params: int
    frozen_layers: int
    drop_fraction: float | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


def read_runs(log_path) -> tuple[list[dict], list[str]]:
    """Every parseable record, plus one warning per malformed line."""
    p = Path(log_path)
    if not p.exists():
        raise ConfigError(f"runs log not found: {p}")
    records, warnings = [], []
    for i, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "run_id" not in rec:
                raise ValueError("not a run record object")
            records.append(rec)
        except ValueError as e:
            warnings.append(f"line {i}: {e}")
    return records, warnings


def unique_run_id(log_path, base: str) -> str:
    p = Path(log_path)
    if not p.exists():
        return base
    ids = {r.get("run_id") for r in read_runs(p)[0]}
    if base not in ids:
        return base
    n = 2
    while f"{base}-r{n}" in ids:
        n += 1
    return f"{base}-r{n}"


def append_run(log_path, record: RunRecord) -> None:
    """Append one record as one whole line; the log is never rewritten."""
    p = Path(log_path)
    if p.exists():
        ids = {r.get("run_id") for r in read_runs(p)[0]}
        if record.run_id in ids:
            raise ConfigError(f"run id {record.run_id!r} already in {p}")
    line = (json.dumps(record.to_dict(), sort_keys=True) + "\n").encode()
    fd = os.open(p, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        # one write() call, so concurrent appenders cannot interleave
        os.write(fd, line)
    finally:
        os.close(fd)
