"""Command-line front end: simulate, build datasets, train, sweep, report.

Every training invocation appends one provenance record to a runs.jsonl
log, and `report` turns a log back into summary tables, charts and CDF
data. Output directories are never written into while non-empty unless
--force is given; the sweep commands then resume their CSV instead of
recomputing finished rows.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import CSV_COLUMNS as ABLATION_COLUMNS
from .ablation import ablation_sweep
from .config import (
    ExperimentConfig,
    RunRecord,
    append_run,
    read_runs,
    unique_run_id,
)
from .errors import ConfigError, CsilocError
from .model import (
    CONV_PREFIX_END,
    layer_param_counts,
    load_checkpoint,
    param_report,
    save_checkpoint,
    total_params,
    trainable_params,
)
from .records import load_session, save_session
from .seeds import derive_seed
from .simulate import simulate_session
from .tensorize import Dataset, build_fold, load_dataset
from .tensorize import save_dataset as _save_dataset
from .train import build_responsive_model, error_cdf, evaluate_model, train_model
from .transfer import CSV_COLUMNS as TRANSFER_COLUMNS
from .transfer import read_rows, transfer_sweep


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out} already contains files; pass --force to "
            "write into it"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_manifest(d: Path) -> dict:
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no manifest.json in {d}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"manifest {mpath} is not valid JSON: {e}") from e


def _load_fold(data_dir: Path, cfg: ExperimentConfig | None, fold) -> Dataset:
    """Accept either a built dataset directory or a raw session directory."""
    m = _read_manifest(data_dir)
    kind = m.get("format")
    if kind == "csiloc-dataset":
        ds = load_dataset(data_dir)
        if fold is not None and fold != ds.fold:
            raise ConfigError(
                f"dataset {data_dir} was built for fold {ds.fold}, not {fold}"
            )
        return ds
    if kind == "csiloc-sessions":
        if fold is None:
            raise ConfigError("--fold is required with a raw session directory")
        sessions = [load_session(data_dir / f) for f in m["session_files"]]
        tol = cfg.align_tolerance_s if cfg is not None else 0.002
        return build_fold(sessions, fold, tol)
    raise ConfigError(f"unrecognized manifest format {kind!r} in {data_dir}")


def _log_path(args, out: Path) -> Path:
    return Path(args.log) if args.log else out.parent / "runs.jsonl"


def _write_errors_csv(path, errors) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["error_m"])
        for e in np.asarray(errors, dtype=np.float64):
            w.writerow([f"{e:.9g}"])


def _read_errors_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["error_m"]) for r in rows], dtype=np.float64)


def _write_cdf_csv(path, errors) -> None:
    xs, ps = error_cdf(np.asarray(errors, dtype=np.float64))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["error_m", "cdf"])
        for x, p in zip(xs, ps):
            w.writerow([f"{x:.9g}", f"{p:.9g}"])


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = _prepare_out(args.out, args.force)
    files, ids = [], []
    for i in range(cfg.sessions):
        sid = f"{cfg.scenario}-{i:02d}"
        session = simulate_session(
            cfg.room(),
            cfg.trajectory(),
            cfg.sim(),
            sid,
            derive_seed(args.seed, "session", i),
        )
        fname = f"{sid}.csir"
        save_session(out / fname, session)
        files.append(fname)
        ids.append(sid)
        print(f"wrote {fname}: {session.packet_count()} packets, "
              f"{len(session.track_t)} track fixes")
    manifest = {
        "format": "csiloc-sessions",
        "version": 1,
        "scenario": cfg.scenario,
        "config_hash": cfg.hash,
        "seed": args.seed,
        "session_files": files,
        "session_ids": ids,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"{len(files)} sessions in {out}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    data = Path(args.data)
    m = _read_manifest(data)
    if m.get("format") != "csiloc-sessions":
        raise ConfigError(f"{data} does not hold raw sessions")
    out = _prepare_out(args.out, args.force)
    sessions = [load_session(data / f) for f in m["session_files"]]
    ds = build_fold(sessions, args.fold, cfg.align_tolerance_s)
    _save_dataset(ds, out)
    print(ds.summary())
    print(f"dataset in {out}")
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    ds = _load_fold(Path(args.data), cfg, args.fold)
    out = _prepare_out(args.out, args.force)
    model = build_responsive_model(
        cfg.model_spec(), ds.X_train, seed=derive_seed(args.seed, "init"), log=print
    )
    print(param_report(model.spec))
    tc = cfg.train_config(seed=derive_seed(args.seed, "shuffle"))
    res = train_model(
        model, ds.X_train, ds.y_train, ds.X_val, ds.y_val, tc, log=print
    )
    metrics = evaluate_model(model, ds.X_test, ds.y_test)
    save_checkpoint(
        out / "checkpoint.lnck",
        model,
        meta={
            "scenario": cfg.scenario,
            "config_hash": cfg.hash,
            "seed": args.seed,
            "fold": ds.fold,
        },
    )
    _write_errors_csv(out / "errors.csv", metrics["errors"])
    (out / "history.json").write_text(json.dumps(res.history, indent=2))
    result = {
        "mean_error_m": metrics["mean_m"],
        "median_error_m": metrics["median_m"],
        "p90_error_m": metrics["p90_m"],
        "epochs": res.epochs,
        "train_seconds": res.wall_seconds,
        "trainable_params": trainable_params(model),
        "total_params": total_params(model),
        "config_hash": cfg.hash,
        "seed": args.seed,
        "fold": ds.fold,
        "scenario": cfg.scenario,
    }
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    log_path = _log_path(args, out)
    rid = unique_run_id(log_path, f"train-{cfg.scenario}-f{ds.fold}-s{args.seed}")
    append_run(
        log_path,
        RunRecord(
            run_id=rid,
            command="train",
            config_hash=cfg.hash,
            seed=args.seed,
            scenario=cfg.scenario,
            fold=ds.fold,
            mean_error_m=metrics["mean_m"],
            epochs=res.epochs,
            train_seconds=res.wall_seconds,
            trainable_params=trainable_params(model),
            frozen_layers=0,
            out_dir=str(out),
        ),
    )
    print(
        f"test mean error {metrics['mean_m']:.4f} m (median "
        f"{metrics['median_m']:.4f}, p90 {metrics['p90_m']:.4f}) after "
        f"{res.epochs} epochs in {res.wall_seconds:.1f} s"
    )
    print(f"run {rid} appended to {log_path}")
    return 0


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_file(args.config) if args.config else None
    ds = _load_fold(Path(args.data), cfg, args.fold)
    out = _prepare_out(args.out, args.force)
    metrics = evaluate_model(model, ds.X_test, ds.y_test)
    _write_errors_csv(out / "errors.csv", metrics["errors"])
    _write_cdf_csv(out / "cdf.csv", metrics["errors"])
    summary = {
        "mean_error_m": metrics["mean_m"],
        "median_error_m": metrics["median_m"],
        "p90_error_m": metrics["p90_m"],
        "samples": int(len(metrics["errors"])),
        "checkpoint_meta": meta,
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(
        f"mean {metrics['mean_m']:.4f} m, median {metrics['median_m']:.4f} m, "
        f"p90 {metrics['p90_m']:.4f} m over {len(metrics['errors'])} samples"
    )
    return 0


def cmd_transfer_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    base, _ = load_checkpoint(args.base)
    ds = _load_fold(Path(args.data), cfg, args.fold)
    out = _prepare_out(args.out, args.force)
    csv_path = out / "transfer.csv"
    before = (
        {int(r["k"]) for r in read_rows(csv_path)} if csv_path.exists() else set()
    )
    rows = transfer_sweep(
        base,
        ds,
        cfg.train_config(),
        cfg.freeze_ks,
        seed=args.seed,
        csv_path=csv_path,
        log=print,
    )
    log_path = _log_path(args, out)
    for row in rows:
        if row.k in before:
            continue
        rid = unique_run_id(
            log_path, f"transfer-{cfg.scenario}-k{row.k}-s{args.seed}"
        )
        append_run(
            log_path,
            RunRecord(
                run_id=rid,
                command="transfer-sweep",
                config_hash=cfg.hash,
                seed=args.seed,
                scenario=cfg.scenario,
                fold=ds.fold,
                mean_error_m=row.mean_error_m,
                epochs=row.epochs,
                train_seconds=row.train_seconds,
                trainable_params=row.trainable_params,
                frozen_layers=row.k,
                out_dir=str(out),
            ),
        )
    print(f"{'k':>3} {'mean_error_m':>13} {'trainable':>10} {'epochs':>7}")
    for row in rows:
        print(
            f"{row.k:>3} {row.mean_error_m:>13.4f} {row.trainable_params:>10} "
            f"{row.epochs:>7}"
        )
    print(f"sweep CSV at {csv_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    base, _ = load_checkpoint(args.base)
    ds = _load_fold(Path(args.data), cfg, args.fold)
    out = _prepare_out(args.out, args.force)
    csv_path = out / "ablation.csv"
    before = (
        {float(r["drop_fraction"]) for r in read_rows(csv_path, ABLATION_COLUMNS)}
        if csv_path.exists()
        else set()
    )
    rows = ablation_sweep(
        base,
        ds,
        cfg.train_config(),
        cfg.fractions,
        seed=args.seed,
        csv_path=csv_path,
        log=print,
    )
    # dense tail is all that trains once the feature extractor is frozen
    tail = sum(layer_param_counts(base.spec)[CONV_PREFIX_END:])
    log_path = _log_path(args, out)
    for row in rows:
        if row.drop_fraction in before:
            continue
        rid = unique_run_id(
            log_path,
            f"ablate-{cfg.scenario}-p{row.drop_fraction:.2f}-s{args.seed}",
        )
        append_run(
            log_path,
            RunRecord(
                run_id=rid,
                command="ablate",
                config_hash=cfg.hash,
                seed=args.seed,
                scenario=cfg.scenario,
                fold=ds.fold,
                mean_error_m=row.mean_error_m,
                epochs=row.epochs,
                train_seconds=row.train_seconds,
                trainable_params=tail,
                frozen_layers=CONV_PREFIX_END,
                drop_fraction=row.drop_fraction,
                out_dir=str(out),
            ),
        )
    print(f"{'drop':>5} {'kept':>6} {'mean_error_m':>13} {'epochs':>7}")
    for row in rows:
        print(
            f"{row.drop_fraction:>5.2f} {row.retained_samples:>6} "
            f"{row.mean_error_m:>13.4f} {row.epochs:>7}"
        )
    print(f"sweep CSV at {csv_path}")
    return 0


def _chart_transfer(csv_path: Path, png_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(read_rows(csv_path), key=lambda r: int(r["k"]))
    ks = [int(r["k"]) for r in rows]
    errs = [float(r["mean_error_m"]) for r in rows]
    secs = [float(r["train_seconds"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.5))
    ax1.plot(ks, errs, marker="o")
    ax1.set_xlabel("frozen layers k")
    ax1.set_ylabel("mean error (m)")
    ax2.plot(ks, secs, marker="o")
    ax2.set_xlabel("frozen layers k")
    ax2.set_ylabel("training time (s)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _chart_ablation(csv_path: Path, png_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(
        read_rows(csv_path, ABLATION_COLUMNS),
        key=lambda r: float(r["drop_fraction"]),
    )
    ps = [float(r["drop_fraction"]) for r in rows]
    errs = [float(r["mean_error_m"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(ps, errs, marker="o")
    ax.set_xlabel("dropped training fraction")
    ax.set_ylabel("mean error (m)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def emit_report(records: list[dict], warnings: list[str], out: Path) -> int:
    """Summary table, sweep charts and per-run CDF data from a runs log."""
    for w in warnings:
        print(f"warning: {w}")
    if not records:
        print("warning: no runs to report")
        (out / "summary.txt").write_text("no runs\n")
        return len(warnings) + 1

    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        key = (str(r.get("scenario", "?")), str(r.get("command", "?")))
        groups.setdefault(key, []).append(float(r.get("mean_error_m", "nan")))
    lines = [f"{'scenario':<20} {'command':<16} {'runs':>4} {'mean_error_m':>12}"]
    csv_rows = []
    for scenario, command in sorted(groups):
        errs = groups[(scenario, command)]
        mean = sum(errs) / len(errs)
        lines.append(f"{scenario:<20} {command:<16} {len(errs):>4} {mean:>12.4f}")
        csv_rows.append([scenario, command, len(errs), f"{mean:.4f}"])
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "command", "runs", "mean_error_m"])
        w.writerows(csv_rows)
    print(text, end="")

    seen_dirs = set()
    for r in records:
        d = r.get("out_dir")
        if not d or d in seen_dirs:
            continue
        seen_dirs.add(d)
        dpath = Path(d)
        tag = dpath.name or "run"
        src = dpath / "transfer.csv"
        if src.exists():
            shutil.copyfile(src, out / f"transfer-{tag}.csv")
            _chart_transfer(src, out / f"transfer-{tag}.png")
            print(f"transfer sweep {tag}: CSV + chart")
        src = dpath / "ablation.csv"
        if src.exists():
            shutil.copyfile(src, out / f"ablation-{tag}.csv")
            _chart_ablation(src, out / f"ablation-{tag}.png")
            print(f"ablation sweep {tag}: CSV + chart")

    seen_errors = set()
    for r in records:
        d = r.get("out_dir")
        if not d or d in seen_errors:
            continue
        src = Path(d) / "errors.csv"
        if not src.exists():
            continue
        seen_errors.add(d)
        _write_cdf_csv(out / f"cdf-{r['run_id']}.csv", _read_errors_csv(src))
        print(f"error CDF for {r['run_id']}")

    if warnings:
        print(f"{len(warnings)} warnings")
    return len(warnings)


def cmd_report(args) -> int:
    records, warnings = read_runs(args.runs)
    out = _prepare_out(args.out, args.force)
    emit_report(records, warnings, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="csiloc",
        description="Desk-scale WiFi CSI indoor localization experiments",
    )
    p.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=False, log=False):
        if config:
            sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if log:
            sp.add_argument(
                "--log", default=None,
                help="runs.jsonl path (default: parent of --out)",
            )
        sp.add_argument(
            "--force", action="store_true",
            help="write into a non-empty output directory",
        )

    sp = sub.add_parser("simulate", help="generate CSIR1 session files")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("build-dataset", help="align, window and normalize one fold")
    sp.add_argument("--data", required=True, help="session directory")
    sp.add_argument("--fold", type=int, required=True)
    common(sp)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train a position regressor")
    sp.add_argument("--data", required=True, help="session or dataset directory")
    sp.add_argument("--fold", type=int, default=None)
    common(sp, seed=True, log=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a fold's test set")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="session or dataset directory")
    sp.add_argument("--fold", type=int, default=None)
    sp.add_argument("--config", default=None, help="experiment JSON (optional)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument(
        "--force", action="store_true",
        help="write into a non-empty output directory",
    )
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("transfer-sweep", help="layer-freezing transfer sweep")
    sp.add_argument("--base", required=True, help="base model checkpoint")
    sp.add_argument("--data", required=True, help="session or dataset directory")
    sp.add_argument("--fold", type=int, default=None)
    common(sp, seed=True, log=True)
    sp.set_defaults(func=cmd_transfer_sweep)

    sp = sub.add_parser("ablate", help="training-data ablation sweep")
    sp.add_argument("--base", required=True, help="base model checkpoint")
    sp.add_argument("--data", required=True, help="session or dataset directory")
    sp.add_argument("--fold", type=int, default=None)
    common(sp, seed=True, log=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="summaries, charts and CDFs from a runs log")
    sp.add_argument("--runs", required=True, help="runs.jsonl path")
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CsilocError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        name = getattr(e, "filename", None) or str(e)
        print(f"error: missing input file: {name}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
