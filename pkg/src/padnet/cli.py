"""``padnet`` command line: train, partition, evaluate, analyze, sweep, compare, export-mask.

Every command writes ``manifest.json`` into ``--out`` before doing any work
(resolved config, versions, seed) and rewrites it at the end with the list of
files produced.  ``PADNET_THREADS`` caps BLAS threads (default 1, which keeps
runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, harness, partition
from .config import METHODS, ConfigError, ExperimentConfig, json_schema, load_config, with_method
from .data import BatchIterator
from .models import build_network


def _versions() -> dict[str, str]:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"padnet": pkg, "python": platform.python_version(), "numpy": np.__version__}


class Manifest:
    def __init__(self, out: Path, command: str, cfg: ExperimentConfig | None, extra: dict | None = None):
        self.out = out
        self.path = out / "manifest.json"
        self.body = {
            "command": command,
            "argv": sys.argv[1:],
            "seed": cfg.seed if cfg is not None else None,
            "config": cfg.model_dump(mode="json") if cfg is not None else None,
            "versions": _versions(),
            "threads": _threads(),
            **(extra or {}),
            "status": "running",
            "files": [],
        }
        out.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str) -> None:
        files = sorted(str(p.relative_to(self.out)) for p in self.out.rglob("*")
                       if p.is_file() and p != self.path and not p.name.endswith(".tmp"))
        self.body.update(status=status, files=files)
        self._write()


def _threads() -> int:
    raw = os.environ.get("PADNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"PADNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SystemExit(f"PADNET_THREADS must be a positive integer, got {raw!r}")
    return n


def _load(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "pad.kappa": getattr(args, "kappa", None)}
    cfg = load_config(args.config, overrides)
    if getattr(args, "method", None):
        cfg = with_method(cfg, args.method, getattr(args, "kappa", None)).model_copy(
            update={"sweep": cfg.sweep, "compare": cfg.compare})
    return cfg


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load(args)
    man = Manifest(args.out, "train", cfg)
    try:
        res = harness.train(cfg, args.out)
    except Exception:
        man.finish("failed")
        raise
    man.finish("ok")
    print(f"test accuracy {res.summary['test_accuracy']:.4f}  ->  {args.out}")
    return 0


def cmd_partition(args) -> int:
    """Partition a freshly initialised model and save masks without training."""
    cfg = _load(args)
    if not cfg.pad_active:
        raise ConfigError("method", f"partition needs a partition method, got {cfg.method!r}")
    man = Manifest(args.out, "partition", cfg)
    train_ds, _ = harness.load_data(cfg)
    streams = harness.Streams.from_seed(cfg.seed)
    model = build_network(cfg.model, cfg.method, streams.init, cfg.pad)
    tau = cfg.pad.partition_tau or cfg.temperature.start
    stream = BatchIterator(train_ds, cfg.optim.batch_size, streams.partition_seed).stream()
    p = cfg.pad
    res = partition.run_method(p.method, model, stream, p.kappa, p.effective_steps, p.batches, p.budget, tau,
                               streams.random_partition)
    res.write_jsonl(args.out / "partition.jsonl")
    analysis.write_csv(args.out / "ratios.csv", analysis.ratio_distribution(model))
    harness.save_checkpoint(args.out / harness.CHECKPOINT_NAME, model, cfg, {"epoch": 0})
    man.finish("ok")
    return 0


def _checkpoint_model(args):
    model, cfg, meta = harness.load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = cfg.model_copy(update={"data": load_config(args.config).data})
    return model, cfg


def cmd_evaluate(args) -> int:
    model, cfg = _checkpoint_model(args)
    man = Manifest(args.out, "evaluate", cfg, {"checkpoint": str(args.checkpoint)})
    _, test = harness.load_data(cfg)
    tau = args.tau if args.tau is not None else cfg.temperature.end
    ev = harness.evaluate(model, test, tau)
    harness.write_json(args.out / "eval.json", ev)
    man.finish("ok")
    print(f"accuracy {ev['accuracy']:.4f}  loss {ev['loss']:.4f}")
    return 0


def cmd_analyze(args) -> int:
    model, cfg = _checkpoint_model(args)
    man = Manifest(args.out, "analyze", cfg, {"checkpoint": str(args.checkpoint)})
    _, test = harness.load_data(cfg)
    tau = args.tau if args.tau is not None else cfg.temperature.end
    rows = analysis.variance_report(model, test.inputs[:args.samples], tau)
    analysis.write_csv(args.out / "variance.csv", rows)
    analysis.write_csv(args.out / "accounting.csv", analysis.param_mac_count(model))
    ratios = analysis.ratio_distribution(model)
    analysis.write_csv(args.out / "ratios.csv", ratios)
    pads = {name for name, _ in model.pad_layers()}
    harness.write_json(args.out / "analysis.json", {
        "variance": [r.__dict__ for r in rows],
        "global_dynamic_ratio": analysis.weighted_ratio([r for r in ratios if r.layer in pads]),
    })
    man.finish("ok")
    return 0


def cmd_export_mask(args) -> int:
    model, cfg = _checkpoint_model(args)
    man = Manifest(args.out, "export-mask", cfg, {"checkpoint": str(args.checkpoint)})
    layers = dict(model.pad_layers())
    if not layers:
        man.finish("failed")
        raise SystemExit("checkpoint has no partially dynamic layers")
    names = [args.layer] if args.layer else list(layers)
    for name in names:
        if name not in layers:
            man.finish("failed")
            raise SystemExit(f"unknown layer {name!r}; choose from {sorted(layers)}")
        analysis.export_mask(layers[name].mask, analysis.mask_shape(layers[name]), args.out / f"{name}.pgm")
    man.finish("ok")
    return 0


def _run_cells(cells: list[tuple[str, ExperimentConfig]], out: Path) -> list[dict]:
    results = []
    for label, cfg in cells:
        cell_dir = out / label
        try:
            s = harness.train(cfg, cell_dir).summary
            results.append({"cell": label, "ok": True, "summary": s})
        except Exception as exc:  # a failed cell is recorded and the sweep continues
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
            results.append({"cell": label, "ok": False, "error": f"{type(exc).__name__}: {exc}"})
            print(f"cell {label} failed: {exc}", file=sys.stderr)
    return results


def sweep_table(cells: list[dict], kappas: list[float]) -> list[dict]:
    """Per kappa: mean and sample std of test accuracy and normalised performance
    ``(x - xbar) / xbar`` with ``xbar`` the mean over kappas."""
    rows = []
    for kappa in kappas:
        accs = [c["summary"]["test_accuracy"] for c in cells if c["ok"] and c["kappa"] == kappa]
        failed = sum(1 for c in cells if not c["ok"] and c["kappa"] == kappa)
        agg = harness.aggregate(accs) if accs else {"mean": float("nan"), "std": float("nan"), "n": 0}
        rows.append({"kappa": kappa, "mean": agg["mean"], "std": agg["std"], "n": agg["n"], "failed": failed})
    done = [r["mean"] for r in rows if r["n"]]
    xbar = float(np.mean(done)) if done else float("nan")
    for r in rows:
        r["normalized"] = (r["mean"] - xbar) / xbar if r["n"] else float("nan")
    return rows


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigError("sweep", "config has no sweep section")
    if not cfg.pad_active:
        raise ConfigError("method", "a kappa sweep needs a partition method")
    man = Manifest(args.out, "sweep", cfg)
    kappas = [args.kappa] if args.kappa is not None else cfg.sweep.kappas
    cells, meta = [], []
    for kappa in kappas:
        for i in range(cfg.sweep.seeds):
            seed = cfg.seed + i
            cells.append((f"kappa-{kappa:g}/seed-{seed}", with_method(cfg, cfg.method, kappa, seed)))
            meta.append({"kappa": kappa, "seed": seed})
    results = [dict(r, **m) for r, m in zip(_run_cells(cells, args.out), meta)]
    table = sweep_table(results, kappas)
    _write_table(args.out / "sweep.csv", table)
    harness.write_json(args.out / "sweep.json", {"table": table, "cells": results})
    ok = all(r["ok"] for r in results)
    man.finish("ok" if ok else "failed")
    for r in table:
        print(f"kappa {r['kappa']:<5g} acc {r['mean']:.4f} +- {r['std']:.4f}  norm {r['normalized']:+.4f}"
              + (f"  ({r['failed']} failed)" if r["failed"] else ""))
    return 0 if ok else 1


def compare_table(cells: list[dict], methods: list[str]) -> list[dict]:
    rows = []
    for method in methods:
        accs = [c["summary"]["test_accuracy"] for c in cells if c["ok"] and c["method"] == method]
        failed = sum(1 for c in cells if not c["ok"] and c["method"] == method)
        agg = harness.aggregate(accs) if accs else {"mean": float("nan"), "std": float("nan"), "n": 0}
        rows.append({"method": method, "mean": agg["mean"], "std": agg["std"], "n": agg["n"], "failed": failed})
    order = sorted((r for r in rows if r["n"]), key=lambda r: -r["mean"])
    for rank, r in enumerate(order, start=1):
        r["rank"] = rank
    return rows


def cmd_compare(args) -> int:
    cfg = _load(args)
    if cfg.compare is None:
        raise ConfigError("compare", "config has no compare section")
    man = Manifest(args.out, "compare", cfg)
    methods = [args.method] if args.method else cfg.compare.methods
    cells, meta = [], []
    for method in methods:
        for i in range(cfg.compare.seeds):
            seed = cfg.seed + i
            cells.append((f"{method}/seed-{seed}", with_method(cfg, method, args.kappa, seed)))
            meta.append({"method": method, "seed": seed})
    results = [dict(r, **m) for r, m in zip(_run_cells(cells, args.out), meta)]
    table = compare_table(results, methods)
    _write_table(args.out / "compare.csv", table)
    harness.write_json(args.out / "compare.json", {"table": table, "cells": results})
    ok = all(r["ok"] for r in results)
    man.finish("ok" if ok else "failed")
    for r in sorted(table, key=lambda r: r.get("rank", 1 << 30)):
        print(f"{r.get('rank', '-')!s:>2} {r['method']:<13} acc {r['mean']:.4f} +- {r['std']:.4f}")
    return 0 if ok else 1


def cmd_schema(args) -> int:
    print(json.dumps(json_schema(), indent=2, sort_keys=True))
    return 0


def _write_table(path: Path, rows: list[dict]) -> None:
    fields = sorted({k for r in rows for k in r}, key=lambda k: list(rows[0]).index(k) if k in rows[0] else 99)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="padnet", description="Partially dynamic networks at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="experiment JSON")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    def overrides(p):
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--kappa", type=float, help="override pad.kappa")
        p.add_argument("--method", choices=METHODS, help="override the method")

    for name, fn, help_ in [("train", cmd_train, "train one model"),
                            ("partition", cmd_partition, "partition at initialisation, no training"),
                            ("sweep", cmd_sweep, "grid over kappa x seeds"),
                            ("compare", cmd_compare, "compare partition methods")]:
        p = sub.add_parser(name, help=help_)
        common(p)
        overrides(p)
        p.set_defaults(fn=fn)

    for name, fn, help_ in [("evaluate", cmd_evaluate, "accuracy and loss of a checkpoint"),
                            ("analyze", cmd_analyze, "variances, accounting and ratios"),
                            ("export-mask", cmd_export_mask, "write masks as PGM images")]:
        p = sub.add_parser(name, help=help_)
        common(p, config_required=False)
        p.add_argument("--checkpoint", type=Path, required=True)
        if name != "export-mask":
            p.add_argument("--tau", type=float, help="attention temperature (default: final)")
        if name == "analyze":
            p.add_argument("--samples", type=int, default=64, help="test samples for variances")
        if name == "export-mask":
            p.add_argument("--layer", help="single layer name, e.g. body.0 (default: all)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
