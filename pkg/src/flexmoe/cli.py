"""Command-line entry point: ``flexmoe {train,eval,analyze,gradcheck,synth}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .checkpoint import load_model, save_checkpoint
from .data import load_manifest, split_dataset, synth_generate, write_dataset_csv
from .errors import ConfigError, FlexMoEError
from .metrics import (
    activation_matrix,
    bank_similarity,
    collect_routing,
    evaluate,
    write_activation_matrix,
    write_eval_report,
    write_similarity,
)
from .model import FlexMoE
from .training import fit, gradient_suite

EPOCH_COLUMNS = ["epoch", "schedule", "task", "router_ce", "balance", "total", "val_accuracy", "val_macro_f1"]
STEP_COLUMNS = ["step", "task", "router_ce", "balance", "total"]
GRADCHECK_TOLERANCE = 1e-5


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class CsvLog:
    """Append-only CSV writer that flushes every row."""

    def __init__(self, path, columns):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        self.columns = columns
        self.writer.writerow(columns)

    def write(self, row):
        self.writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


def load_splits(cfg: C.RunConfig):
    ds = load_manifest(cfg.manifest) if cfg.manifest else synth_generate(cfg.synth_config())
    return ds, split_dataset(ds, seed=cfg.split_seed).impute()


def seed_dir(out, seed) -> Path:
    path = Path(out) / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_summary(path, reports: dict):
    """Mean and sample standard deviation of each metric across seeds."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "n_seeds"] + [f"seed_{s}" for s in reports])
        for i, (name, _) in enumerate(next(iter(reports.values())).rows()):
            values = np.array([r.rows()[i][1] for r in reports.values()], dtype=np.float64)
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            w.writerow([name, _fmt(values.mean()), _fmt(std), values.size] + [_fmt(v) for v in values])


# ---------------------------------------------------------------- commands


def cmd_train(cfg, args):
    _, splits = load_splits(cfg)
    out = Path(cfg.out)
    reports = {}
    for seed in cfg.seeds:
        sdir = seed_dir(out, seed)
        model = FlexMoE(cfg.model_config(seed))
        tcfg = cfg.train_config(seed)
        epochs_log = CsvLog(sdir / "epochs.csv", EPOCH_COLUMNS)
        steps_log = CsvLog(sdir / "steps.csv", STEP_COLUMNS)

        def on_epoch(row, state):
            epochs_log.write(row)
            save_checkpoint(sdir / "last.npz", model, state, extra={"run_config": cfg.to_dict()})

        try:
            res = fit(model, splits.train, splits.val, tcfg, on_epoch=on_epoch, on_step=steps_log.write)
        finally:
            epochs_log.close()
            steps_log.close()
        save_checkpoint(
            sdir / "best.npz", model, extra={"run_config": cfg.to_dict(), "best_epoch": res.best_epoch}
        )
        report = evaluate(model, splits.test, batch_size=cfg.eval_batch_size)
        write_eval_report(report, sdir / "eval_report.csv")
        reports[seed] = report
        print(f"seed {seed}: best epoch {res.best_epoch}, test accuracy {report.accuracy:.4f}", flush=True)
    write_summary(out / "summary.csv", reports)
    return 0


def _checkpoint_for(cfg, args, seed):
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(cfg.out) / f"seed_{seed}" / "best.npz"


def cmd_eval(cfg, args):
    _, splits = load_splits(cfg)
    reports = {}
    for seed in cfg.seeds:
        model, _, _ = load_model(_checkpoint_for(cfg, args, seed))
        report = evaluate(model, splits.test, batch_size=cfg.eval_batch_size)
        write_eval_report(report, seed_dir(cfg.out, seed) / "eval_report.csv")
        reports[seed] = report
        print(f"seed {seed}: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f} auc {report.auc_macro:.4f}")
    write_summary(Path(cfg.out) / "summary.csv", reports)
    return 0


def cmd_analyze(cfg, args):
    _, splits = load_splits(cfg)
    # routing is inspected on the training split, the only one holding partial combinations
    for seed in cfg.seeds:
        model, _, _ = load_model(_checkpoint_for(cfg, args, seed))
        sdir = seed_dir(cfg.out, seed)
        logs = collect_routing(model, splits.train, batch_size=cfg.eval_batch_size)
        write_activation_matrix(activation_matrix(logs, model.modality_set, model.index_map), sdir / "activation_matrix.csv")
        if model.bank is not None:
            sim = bank_similarity(model.bank, model.index_map)
            write_similarity(sim.rows, sdir / "bank_similarity_rows.csv", "observed_combo")
            write_similarity(sim.cols, sdir / "bank_similarity_cols.csv", "missing_modality")
        print(f"seed {seed}: wrote analysis to {sdir}")
    return 0


def cmd_gradcheck(cfg, args):
    _, splits = load_splits(cfg)
    ds = splits.train
    # a small batch covering full and partial samples, so every loss term is active
    rng = np.random.default_rng(cfg.seeds[0])
    full = np.flatnonzero(ds.is_full())
    partial = np.flatnonzero(~ds.is_full())
    pick = list(rng.choice(full, size=min(len(full), args.samples // 2), replace=False))
    if partial.size:
        pick += list(rng.choice(partial, size=min(len(partial), args.samples - len(pick)), replace=False))
    batch = ds.subset(np.sort(np.array(pick, dtype=np.int64)))
    model = FlexMoE(cfg.model_config(cfg.seeds[0]))
    t0 = time.perf_counter()
    errors = gradient_suite(model, batch, cfg.lambda_aux, eps=args.eps, max_coords=args.max_coords, seed=cfg.seeds[0])
    elapsed = time.perf_counter() - t0
    result = {k: float(v) for k, v in errors.items()}
    result.update(seconds=elapsed, eps=args.eps, max_coords=args.max_coords, samples=len(batch))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"max relative error {result['all']:.3e} ({elapsed:.1f} s)")
    if result["all"] >= GRADCHECK_TOLERANCE:
        raise GradcheckFailed(f"max relative error {result['all']:.3e} exceeds {GRADCHECK_TOLERANCE:g}")
    return 0


class GradcheckFailed(FlexMoEError):
    pass


def cmd_synth(cfg, args):
    if cfg.manifest:
        raise ConfigError("synth generates data; unset manifest", ["manifest"])
    ds = synth_generate(cfg.synth_config())
    path = write_dataset_csv(ds, Path(cfg.out) / "data")
    print(f"wrote {len(ds)} samples to {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def build_parser():
    parser = argparse.ArgumentParser(prog="flexmoe", description="Flexible mixture of experts for missing modalities.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration (defaults to the shipped one)")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(C.RunConfig):
            p.add_argument(f"--{f.name}", dest=f"set_{f.name}", metavar=f.name.upper())
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint file (default: <out>/seed_<s>/best.npz)")
        if name == "gradcheck":
            p.add_argument("--eps", type=float, default=1e-5)
            p.add_argument("--max-coords", type=int, default=4, help="coordinates probed per parameter tensor")
            p.add_argument("--samples", type=int, default=4)
    return parser


def _error_line(exc) -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["fields"] = exc.fields
    return json.dumps(payload)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config)
        overrides = {k[len("set_"):]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
        cfg = C.apply_overrides(cfg, overrides).validate()
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        C.dump_config(cfg, Path(cfg.out) / f"{args.command}_config.yaml")
        threads = os.environ.get("FLEXMOE_THREADS")
        limit = int(threads) if threads else None
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](cfg, args)
    except (FlexMoEError, OSError, ValueError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
