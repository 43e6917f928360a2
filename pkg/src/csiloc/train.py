"""Training loop, prediction and localization metrics."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .model import LocNet, ModelSpec, build_model
from .seeds import derive_seed


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 30
    max_epochs: int = 200
    early_stop_patience: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 0


@dataclass
class TrainResult:
    epochs: int
    best_val_loss: float
    wall_seconds: float
    stopped_early: bool
    history: list[dict] = field(default_factory=list)


def _as_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _mean_l1(model: LocNet, X: torch.Tensor, y: torch.Tensor, batch: int = 256) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(X), batch):
            pred = model(X[lo : lo + batch])
            total += torch.abs(pred - y[lo : lo + batch]).sum().item()
    model.train()
    return total / y.numel()


def train_model(
    model: LocNet,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
    log=None,
) -> TrainResult:
    """MAE training with plateau LR decay and patience-based early stopping.

    Improvement is strict (new < best). The best-epoch weights are restored
    before returning, so a run that never improves after its first epoch
    hands back exactly the first epoch's model.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("nothing to train: every layer is frozen")
    Xt, yt = _as_tensor(X_train), _as_tensor(y_train)
    Xv, yv = _as_tensor(X_val), _as_tensor(y_val)
    if len(Xt) == 0 or len(Xv) == 0:
        raise ConfigError("training and validation splits must be non-empty")

    opt = torch.optim.Adamax(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    loss_fn = nn.L1Loss()
    shuffle = torch.Generator().manual_seed(int(cfg.seed) & 0x7FFFFFFFFFFFFFFF)

    best_val = float("inf")
    best_state = None
    bad_epochs = 0
    history = []
    t0 = time.perf_counter()
    epochs_run = 0
    stopped_early = False
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        te = time.perf_counter()
        perm = torch.randperm(len(Xt), generator=shuffle)
        run_loss = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(Xt[idx]), yt[idx])
            loss.backward()
            opt.step()
            run_loss += loss.item() * len(idx)
        train_loss = run_loss / len(Xt)
        val_loss = _mean_l1(model, Xv, yv)
        sched.step(val_loss)
        epochs_run = epoch
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": opt.param_groups[0]["lr"],
                "seconds": time.perf_counter() - te,
            }
        )
        if log is not None:
            log(
                f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
                f"lr {opt.param_groups[0]['lr']:.2e}"
            )
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        epochs=epochs_run,
        best_val_loss=best_val,
        wall_seconds=time.perf_counter() - t0,
        stopped_early=stopped_early,
        history=history,
    )


def predict(model: LocNet, X: np.ndarray, batch: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        Xt = _as_tensor(X)
        for lo in range(0, len(Xt), batch):
            out.append(model(Xt[lo : lo + batch]).numpy())
    model.train()
    return np.concatenate(out) if out else np.empty((0, 2), np.float32)


INIT_ATTEMPTS = 8
RESPONSIVE_FLOOR = 0.05  # prediction std below this means a collapsed net


def prediction_spread(model: LocNet, X: np.ndarray) -> float:
    """Largest per-coordinate std of predictions over a probe batch."""
    return float(predict(model, X).std(axis=0).max())


def build_responsive_model(
    spec: ModelSpec, X_probe: np.ndarray, seed: int = 0, log=None
) -> LocNet:
    """build_model plus an input-sensitivity screen on real data.

    A deep selu stack occasionally initializes into a region where its
    output barely varies across the actual input distribution (white-noise
    probes do not expose this), and such a net only ever learns the mean
    position. Redraw deterministically until the probe batch spreads the
    predictions; the first draw uses `seed` unchanged, so already-healthy
    seeds build the identical model they always did. When nothing passes
    (a degenerate probe gives zero spread for any weights) keep the first
    draw rather than fail: the screen is a rescue, not a gate.
    """
    probe = X_probe[:128]
    first = None
    for attempt in range(INIT_ATTEMPTS):
        s = seed if attempt == 0 else derive_seed(seed, "redraw", attempt)
        model = build_model(spec, seed=s)
        if attempt == 0:
            first = model
        spread = prediction_spread(model, probe)
        if spread >= RESPONSIVE_FLOOR:
            return model
        if log is not None:
            log(f"init seed {s} collapsed (spread {spread:.4f}), redrawing")
    if log is not None:
        log("no init spread the probe; keeping the first draw")
    return first


def euclidean_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample position error in meters, computed in float64."""
    p = np.asarray(pred, np.float64)
    t = np.asarray(truth, np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ConfigError(f"prediction/truth shapes {p.shape} vs {t.shape}")
    return np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])


def error_cdf(errors: np.ndarray):
    """(sorted errors, cumulative probability) pairs for CDF plots."""
    e = np.sort(np.asarray(errors, np.float64))
    if len(e) == 0:
        raise ConfigError("empty error list")
    return e, np.arange(1, len(e) + 1) / len(e)


def evaluate_model(model: LocNet, X: np.ndarray, y: np.ndarray) -> dict:
    errors = euclidean_errors(predict(model, X), y)
    return {
        "errors": errors,
        "mean_m": float(errors.mean()),
        "median_m": float(np.median(errors)),
        "p90_m": float(np.quantile(errors, 0.9)),
    }
