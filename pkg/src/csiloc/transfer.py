"""Layer-freezing transfer: retrain a frozen-prefix model on a new room.

For each prefix length k the base model's first k layers are copied and
frozen, the remaining layers are re-initialized from the seeded fresh-build
distribution (warm_start=False, the default) or copied from the base
(warm_start=True), and the tail is retrained on the target dataset. k = 0
degenerates to a from-scratch run on the target, which is the natural
baseline for the sweep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .errors import ConfigError
from .model import (
    LocNet,
    build_model,
    copy_prefix,
    freeze_prefix,
    total_params,
    trainable_params,
)
from .seeds import derive_seed
from .tensorize import Dataset
from .train import (
    INIT_ATTEMPTS,
    RESPONSIVE_FLOOR,
    TrainConfig,
    evaluate_model,
    prediction_spread,
    train_model,
)

CSV_COLUMNS = [
    "k", "mean_error_m", "train_seconds", "epochs", "trainable_params", "total_params",
]


@dataclass
class TransferRow:
    k: int
    mean_error_m: float
    train_seconds: float
    epochs: int
    trainable_params: int
    total_params: int


def prepare_transfer_model(
    base: LocNet, k: int, seed: int, warm_start: bool = False, X_probe=None
) -> LocNet:
    """Fresh model with base's first k layers copied in and frozen.

    With X_probe given, initializations whose predictions collapse on that
    data are redrawn (same screen as train.build_responsive_model); the
    first draw keeps the historical seed derivation, so healthy inits are
    unchanged by the probe. A deep frozen prefix can cap the reachable
    spread no matter how the tail is drawn, so when every attempt fails
    the first draw is kept instead of raising.
    """
    first = None
    for attempt in range(INIT_ATTEMPTS):
        init_seed = (
            derive_seed(seed, "transfer-init", k)
            if attempt == 0
            else derive_seed(seed, "transfer-init", k, attempt)
        )
        model = build_model(base.spec, seed=init_seed)
        if warm_start:
            copy_prefix(base, model, len(base.spec.layers))
        else:
            copy_prefix(base, model, k)
        if k > 0:
            freeze_prefix(model, k)
        if attempt == 0:
            first = model
        if X_probe is None or prediction_spread(model, X_probe[:128]) >= RESPONSIVE_FLOOR:
            return model
    return first


def _check_input_shape(base: LocNet, ds: Dataset) -> None:
    want = tuple(base.spec.input_shape)
    have = tuple(ds.X_train.shape[1:])
    if want != have:
        raise ConfigError(f"model expects {want} tensors, dataset has {have}")


def transfer_run(
    base: LocNet,
    ds: Dataset,
    k: int,
    cfg: TrainConfig,
    seed: int = 0,
    warm_start: bool = False,
    log=None,
) -> TransferRow:
    """One sweep point: freeze prefix k, retrain the rest, evaluate on test."""
    _check_input_shape(base, ds)
    model = prepare_transfer_model(base, k, seed, warm_start, X_probe=ds.X_train)
    run_cfg = replace(cfg, seed=derive_seed(seed, "transfer-shuffle", k))
    res = train_model(
        model, ds.X_train, ds.y_train, ds.X_val, ds.y_val, run_cfg, log=log
    )
    _assert_frozen_unchanged(base, model, k)
    out = evaluate_model(model, ds.X_test, ds.y_test)
    return TransferRow(
        k=k,
        mean_error_m=out["mean_m"],
        train_seconds=res.wall_seconds,
        epochs=res.epochs,
        trainable_params=trainable_params(model),
        total_params=total_params(model),
    )


def _assert_frozen_unchanged(base: LocNet, model: LocNet, k: int) -> None:
    # frozen means frozen: training must not have touched layers 1..k
    for idx in range(1, k + 1):
        for name, tensor in model.layer_state(idx).items():
            if not torch.equal(tensor, base.layer_state(idx)[name]):
                raise RuntimeError(f"frozen layer {idx} changed during training")


def read_rows(csv_path, columns=CSV_COLUMNS) -> list[dict]:
    path = Path(csv_path)
    if not path.exists():
        return []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != columns:
            raise ConfigError(
                f"{path} columns {reader.fieldnames} do not match {columns}"
            )
        return list(reader)


def append_row(csv_path, columns, values: dict) -> None:
    path = Path(csv_path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        if new:
            writer.writeheader()
        writer.writerow(values)


def transfer_sweep(
    base: LocNet,
    ds: Dataset,
    cfg: TrainConfig,
    k_values=range(1, 28),
    seed: int = 0,
    csv_path=None,
    warm_start: bool = False,
    log=None,
) -> list[TransferRow]:
    """Run every missing k, appending each row to csv_path as it completes.

    Rows already present in the file are not recomputed, so an interrupted
    sweep resumes where it stopped and a complete one is a no-op.
    """
    done: dict[int, TransferRow] = {}
    if csv_path is not None:
        for r in read_rows(csv_path):
            row = TransferRow(
                k=int(r["k"]),
                mean_error_m=float(r["mean_error_m"]),
                train_seconds=float(r["train_seconds"]),
                epochs=int(r["epochs"]),
                trainable_params=int(r["trainable_params"]),
                total_params=int(r["total_params"]),
            )
            done[row.k] = row
    rows = []
    for k in k_values:
        if k in done:
            if log is not None:
                log(f"k={k}: already in {csv_path}, skipping")
            rows.append(done[k])
            continue
        if log is not None:
            log(f"k={k}: training")
        row = transfer_run(base, ds, k, cfg, seed=seed, warm_start=warm_start, log=None)
        if csv_path is not None:
            append_row(csv_path, CSV_COLUMNS, vars(row))
        rows.append(row)
    return sorted(rows, key=lambda r: r.k)
