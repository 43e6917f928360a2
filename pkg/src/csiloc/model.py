"""The 28-layer convolutional position regressor.

Layer indices are 1-based and count structural layers only:

     1-14  conv 3x3, stride 1, same padding, selu
       15  max pool 2x2, stride 2
    16-18  conv 3x3, selu
       19  flatten
    20-27  dense, selu
       28  dense 2, linear  (x, y in meters)

Freezing a prefix k marks layers 1..k non-trainable; pool and flatten have
no parameters but still count in the indexing, so k = 19 freezes exactly
the convolutional feature extractor.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, CsilocError

INPUT_SHAPE = (75, 30, 6)  # rows, subcarriers, channels
BASE_CONV_CHANNELS = [32, 32, 32, 32, 64, 64, 64, 64, 128, 128, 128, 128, 256, 256]
BASE_TAIL_CHANNELS = [256, 256, 256]
BASE_DENSE_WIDTH = 16
N_LAYERS = 28
CONV_PREFIX_END = 19  # last layer of the frozen feature extractor in transfer runs


class CheckpointError(CsilocError):
    """Checkpoint bytes that cannot be trusted or parsed."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str  # conv | pool | flatten | dense
    units: int | None = None  # conv: out channels, dense: out units
    activation: str | None = None  # selu | linear


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    def to_json(self) -> str:
        payload = {
            "input_shape": list(self.input_shape),
            "layers": [
                {"index": l.index, "kind": l.kind, "units": l.units,
                 "activation": l.activation}
                for l in self.layers
            ],
        }
        return json.dumps(payload, sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        payload = json.loads(text)
        layers = [LayerSpec(**d) for d in payload["layers"]]
        return ModelSpec(layers=layers, input_shape=tuple(payload["input_shape"]))


def default_spec(width_scale: float = 1.0, dense_width: int | None = None) -> ModelSpec:
    """The 28-layer architecture, optionally width-scaled for small profiles."""
    if dense_width is None:
        dense_width = BASE_DENSE_WIDTH
    conv = [max(1, round(c * width_scale)) for c in BASE_CONV_CHANNELS]
    tail = [max(1, round(c * width_scale)) for c in BASE_TAIL_CHANNELS]
    layers = []
    idx = 1
    for c in conv:
        layers.append(LayerSpec(idx, "conv", c, "selu"))
        idx += 1
    layers.append(LayerSpec(idx, "pool"))
    idx += 1
    for c in tail:
        layers.append(LayerSpec(idx, "conv", c, "selu"))
        idx += 1
    layers.append(LayerSpec(idx, "flatten"))
    idx += 1
    for _ in range(8):
        layers.append(LayerSpec(idx, "dense", dense_width, "selu"))
        idx += 1
    layers.append(LayerSpec(idx, "dense", 2, "linear"))
    assert idx == N_LAYERS
    return ModelSpec(layers=layers)


def tiny_spec() -> ModelSpec:
    """Sanity-check profile: conv channels / 8, dense width 8."""
    return default_spec(width_scale=1.0 / 8.0, dense_width=8)


def layer_param_counts(spec: ModelSpec) -> list[int]:
    """Parameters per layer, in index order."""
    rows, cols, ch = spec.input_shape
    counts = []
    for l in spec.layers:
        if l.kind == "conv":
            counts.append(ch * l.units * 9 + l.units)
            ch = l.units
        elif l.kind == "pool":
            rows, cols = rows // 2, cols // 2
            counts.append(0)
        elif l.kind == "flatten":
            ch = rows * cols * ch
            counts.append(0)
        elif l.kind == "dense":
            counts.append(ch * l.units + l.units)
            ch = l.units
        else:
            raise ConfigError(f"unknown layer kind {l.kind!r}")
    return counts


def param_totals(spec: ModelSpec) -> dict[str, int]:
    counts = layer_param_counts(spec)
    conv = sum(c for c, l in zip(counts, spec.layers) if l.kind == "conv")
    dense = sum(c for c, l in zip(counts, spec.layers) if l.kind == "dense")
    return {"conv": conv, "dense": dense, "total": conv + dense}


def param_report(spec: ModelSpec) -> str:
    counts = layer_param_counts(spec)
    totals = param_totals(spec)
    lines = [f"{'layer':>5}  {'kind':<8}{'units':>6}  {'params':>10}"]
    for l, c in zip(spec.layers, counts):
        lines.append(f"{l.index:>5}  {l.kind:<8}{l.units or '-':>6}  {c:>10,}")
    lines.append(f"conv total  {totals['conv']:>12,}")
    lines.append(f"dense total {totals['dense']:>12,}")
    lines.append(f"total       {totals['total']:>12,}")
    return "\n".join(lines)


class LocNet(nn.Module):
    """Torch realization of a ModelSpec. Input is (N, 75, 30, 6) float32."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.frozen = [False] * len(spec.layers)
        rows, cols, ch = spec.input_shape
        blocks = []
        for l in spec.layers:
            if l.kind == "conv":
                blocks.append(
                    nn.Sequential(
                        nn.Conv2d(ch, l.units, 3, padding=1), _activation(l.activation)
                    )
                )
                ch = l.units
            elif l.kind == "pool":
                blocks.append(nn.MaxPool2d(2))
                rows, cols = rows // 2, cols // 2
            elif l.kind == "flatten":
                blocks.append(nn.Flatten())
                ch = rows * cols * ch
            elif l.kind == "dense":
                blocks.append(
                    nn.Sequential(nn.Linear(ch, l.units), _activation(l.activation))
                )
                ch = l.units
        self.blocks = nn.ModuleList(blocks)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        # lecun-normal, the init selu's self-normalization analysis assumes
        g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = (
                    m.in_channels * 9 if isinstance(m, nn.Conv2d) else m.in_features
                )
                std = math.sqrt(1.0 / fan_in)
                with torch.no_grad():
                    m.weight.copy_(
                        torch.normal(0.0, std, m.weight.shape, generator=g)
                    )
                    m.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 3, 1, 2).contiguous()
        for b in self.blocks:
            x = b(x)
        return x

    def layer_state(self, index: int) -> dict:
        return {
            k: v for k, v in self.blocks[index - 1].state_dict().items()
        }

    def load_layer_state(self, index: int, state: dict) -> None:
        self.blocks[index - 1].load_state_dict(state)


def _activation(name: str | None) -> nn.Module:
    if name == "selu":
        return nn.SELU()
    if name in (None, "linear"):
        return nn.Identity()
    raise ConfigError(f"unknown activation {name!r}")


def build_model(spec: ModelSpec | None = None, seed: int = 0) -> LocNet:
    return LocNet(spec or default_spec(), seed=seed)


def freeze_prefix(model: LocNet, k: int) -> LocNet:
    """Mark layers 1..k non-trainable. k = 0 unfreezes everything.

    k must leave at least the output layer trainable, so the full depth is
    rejected as a configuration error.
    """
    n = len(model.spec.layers)
    if not 0 <= k < n:
        raise ConfigError(
            f"freeze prefix {k} invalid: must be in [0, {n - 1}], "
            "at least the output layer has to train"
        )
    for i, block in enumerate(model.blocks):
        trainable = (i + 1) > k
        model.frozen[i] = not trainable
        for p in block.parameters():
            p.requires_grad_(trainable)
    return model


def copy_prefix(src: LocNet, dst: LocNet, k: int) -> None:
    """Copy weights of layers 1..k from src into dst (specs must agree)."""
    if src.spec.to_json() != dst.spec.to_json():
        raise ConfigError("cannot copy weights between different architectures")
    for idx in range(1, k + 1):
        dst.load_layer_state(idx, src.layer_state(idx))


def trainable_params(model: LocNet) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def total_params(model: LocNet) -> int:
    return sum(p.numel() for p in model.parameters())


CKPT_MAGIC = b"LNCK"
CKPT_VERSION = 1


def save_checkpoint(path, model: LocNet, meta: dict | None = None) -> None:
    """Weights, architecture, frozen flags and metadata in one portable file."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy().astype("<f4", copy=False)
        blob = a.tobytes()
        tensors.append(
            {"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "spec": json.loads(model.spec.to_json()),
        "spec_sha256": model.spec.sha256(),
        "frozen": model.frozen,
        "meta": meta or {},
        "tensors": tensors,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(hdr)))
        f.write(hdr)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[LocNet, dict]:
    """Rebuild the exact architecture and bit-identical weights."""
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise CheckpointError("checkpoint too short")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, hdr_len = struct.unpack("<HI", raw[4:10])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < 10 + hdr_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[10 : 10 + hdr_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    spec = ModelSpec.from_json(json.dumps(header["spec"]))
    if spec.sha256() != header["spec_sha256"]:
        raise CheckpointError("architecture hash mismatch")
    payload = raw[10 + hdr_len :]
    model = build_model(spec, seed=0)
    state = {}
    expected_end = 0
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        a = np.frombuffer(payload, "<f4", count=n // 4, offset=lo).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(a.copy())
        expected_end = max(expected_end, lo + n)
    if expected_end != len(payload):
        raise CheckpointError("checkpoint payload size mismatch")
    model.load_state_dict(state)
    for i, flag in enumerate(header["frozen"]):
        model.frozen[i] = bool(flag)
        for p in model.blocks[i].parameters():
            p.requires_grad_(not flag)
    return model, header["meta"]
