"""Training-data ablation with the feature extractor frozen.

Every row freezes the base model's first 19 layers (the convolutional
stack), re-initializes the dense tail, drops a uniformly random fraction of
the pooled training samples and retrains. Validation and test data are
never touched, so rows differ only in how much training data survived.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .model import CONV_PREFIX_END, LocNet, total_params, trainable_params
from .seeds import derive_seed
from .tensorize import Dataset
from .train import TrainConfig, evaluate_model, train_model
from .transfer import (
    _check_input_shape,
    append_row,
    prepare_transfer_model,
    read_rows,
)

CSV_COLUMNS = ["drop_fraction", "retained_samples", "mean_error_m", "epochs", "train_seconds"]

DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class AblationRow:
    drop_fraction: float
    retained_samples: int
    mean_error_m: float
    epochs: int
    train_seconds: float


def _frac_key(p: float) -> str:
    return f"{float(p):.6g}"


def retained_count(train_size: int, p: float) -> int:
    return int(round((1.0 - p) * train_size))


def subset_indices(train_size: int, p: float, seed: int) -> np.ndarray:
    """The retained sample indices, fully determined by (seed, p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop fraction {p} outside [0, 1)")
    keep = retained_count(train_size, p)
    rng = np.random.default_rng(derive_seed(seed, "ablate-subset", _frac_key(p)))
    return np.sort(rng.choice(train_size, size=keep, replace=False))


def ablate_once(
    base: LocNet,
    ds: Dataset,
    p: float,
    cfg: TrainConfig,
    seed: int = 0,
    log=None,
) -> AblationRow:
    _check_input_shape(base, ds)
    idx = subset_indices(len(ds.X_train), p, seed)
    if len(idx) < cfg.batch_size:
        raise ConfigError(
            f"dropping {p:.2f} leaves {len(idx)} samples, fewer than one "
            f"batch of {cfg.batch_size}"
        )
    model = prepare_transfer_model(
        base,
        CONV_PREFIX_END,
        derive_seed(seed, "ablate-run", _frac_key(p)),
        X_probe=ds.X_train[idx],
    )
    run_cfg = replace(cfg, seed=derive_seed(seed, "ablate-shuffle", _frac_key(p)))
    res = train_model(
        model, ds.X_train[idx], ds.y_train[idx], ds.X_val, ds.y_val, run_cfg, log=log
    )
    out = evaluate_model(model, ds.X_test, ds.y_test)
    return AblationRow(
        drop_fraction=float(p),
        retained_samples=len(idx),
        mean_error_m=out["mean_m"],
        epochs=res.epochs,
        train_seconds=res.wall_seconds,
    )


def ablation_sweep(
    base: LocNet,
    ds: Dataset,
    cfg: TrainConfig,
    fractions=DEFAULT_FRACTIONS,
    seed: int = 0,
    csv_path=None,
    log=None,
) -> list[AblationRow]:
    """Run every missing fraction, appending to csv_path row by row."""
    done: dict[str, AblationRow] = {}
    if csv_path is not None:
        for r in read_rows(csv_path, CSV_COLUMNS):
            row = AblationRow(
                drop_fraction=float(r["drop_fraction"]),
                retained_samples=int(r["retained_samples"]),
                mean_error_m=float(r["mean_error_m"]),
                epochs=int(r["epochs"]),
                train_seconds=float(r["train_seconds"]),
            )
            done[_frac_key(row.drop_fraction)] = row
    rows = []
    for p in fractions:
        key = _frac_key(p)
        if key in done:
            if log is not None:
                log(f"p={key}: already in {csv_path}, skipping")
            rows.append(done[key])
            continue
        if log is not None:
            log(f"p={key}: training")
        row = ablate_once(base, ds, p, cfg, seed=seed, log=None)
        if csv_path is not None:
            append_row(csv_path, CSV_COLUMNS, vars(row))
        rows.append(row)
    return sorted(rows, key=lambda r: r.drop_fraction)


def sanity_check_sweep(rows: list[AblationRow], train_size: int) -> None:
    """Invariants every finished sweep must satisfy."""
    for row in rows:
        want = retained_count(train_size, row.drop_fraction)
        if row.retained_samples != want:
            raise ConfigError(
                f"row p={row.drop_fraction}: retained {row.retained_samples}, "
                f"expected {want}"
            )
