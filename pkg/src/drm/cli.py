"""``drm`` command line: detect, generate, train, eval and sweep.

Every file written here is line-delimited JSON (or the sequence format of
:mod:`drm.data`) with no timestamps, so identical flags give identical bytes.
Exit status: 0 on success (and "no trigger" for ``detect``), 2 when
``detect`` triggers, 1 on any error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dg
from .config import EXPERIMENTS, ExperimentConfig
from .conformal import MODES, DetectionSequence, MartingaleTrace, detect
from .models import load_checkpoint, save_checkpoint
from .train import TrainingDiverged, evaluate, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_TRIGGERED = 0, 1, 2
WORKERS_ENV = "DRM_WORKERS"

log = logging.getLogger("drm")


class CLIError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _write_lines(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(_dumps(r) + "\n" for r in records))


def trace_records(trace: MartingaleTrace, **meta) -> list[dict]:
    """Header plus one record per time step; ``t`` is 1-based and ``triggered`` is sticky."""
    hit = trace.triggered_at
    header = {"schema": "drm-trace", "schema_version": SCHEMA_VERSION, "length": len(trace.values),
              "threshold": float(trace.threshold),
              "triggered_at": None if hit is None else hit + 1, **meta}
    out = [header]
    p = trace.pvalues if trace.pvalues is not None else np.full(len(trace.values), np.nan)
    for i, (s, pv) in enumerate(zip(trace.values, p)):
        out.append({"t": i + 1, "S_t": float(s), "p_t": float(pv),
                    "triggered": hit is not None and i >= hit})
    return out


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or ``"0-4"`` (inclusive)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise CLIError(f"no seeds in {text!r}")
    return seeds


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise CLIError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip().replace("-", "_"), value


def build_config(args) -> ExperimentConfig:
    """Preset, then ``--config`` file, then ``--set`` pairs, then dedicated flags."""
    d = {}
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    if getattr(args, "experiment", None):
        d["experiment"] = args.experiment
    for item in getattr(args, "set", None) or []:
        key, value = parse_assignment(item)
        d[key] = _parse_value(value)
    if getattr(args, "method", None):
        d["method"] = args.method
    if getattr(args, "data_dir", None):
        d["data_dir"] = args.data_dir
    return ExperimentConfig.from_dict(d)


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CLIError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


# ---------------------------------------------------------------- detect / generate

def cmd_detect(args) -> int:
    if args.input:
        seq = dg.read_sequence(args.input)
    else:
        cfg = ExperimentConfig.preset(args.generate)
        if args.T:
            cfg = cfg.replace(T=args.T, detect_seq_len=min(cfg.detect_seq_len, args.T))
        seq = cfg.load_data(args.data_seed, "train")
    features = seq.inputs.reshape(len(seq), -1)
    labels = seq.labels if args.mode == "concept" else None
    trace = detect(DetectionSequence(features, labels), args.alpha, args.mode, args.gamma,
                   rng=np.random.default_rng(args.seed))
    records = trace_records(trace, alpha=args.alpha, mode=args.mode, gamma=args.gamma, seed=args.seed)
    if args.output:
        _write_lines(args.output, records)
    else:
        sys.stdout.write("".join(_dumps(r) + "\n" for r in records))
    summary = (f"triggered at t={trace.triggered_at + 1}" if trace.triggered
               else f"not triggered (max S_t = {float(np.max(trace.values)):.4g})")
    print(f"detect: {summary}", file=sys.stderr)
    return EXIT_TRIGGERED if trace.triggered else EXIT_OK


def cmd_generate(args) -> int:
    cfg = build_config(args)
    changes = {}
    if args.T and args.split == "train":
        changes.update(T=args.T, detect_seq_len=min(cfg.detect_seq_len, args.T))
    elif args.T:
        changes["test_T"] = args.T
    if changes:
        cfg = cfg.replace(**changes)
    seq = cfg.load_data(args.seed, args.split)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    dg.write_sequence(args.output, seq)
    print(f"generate: wrote {len(seq)} examples to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def run_training(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None,
                 with_traces: bool = True) -> dict:
    """One seed of ``cfg``; writes run artefacts under ``out_dir`` when given."""
    data = cfg.load_data(seed, "train")
    test = cfg.load_data(seed, "test")
    model = cfg.build_model(seed, data.inputs.shape[1:])
    tcfg = cfg.train_config(seed)
    failure = None
    try:
        report = train(model, data, tcfg, test, with_traces=with_traces)
    except TrainingDiverged as e:
        report, failure = e.report, str(e)
    result = {"seed": seed, "train_accuracy": report.train_accuracy,
              "test_accuracy": report.test_accuracy, "error": failure}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        header = {"schema": "drm-report", "schema_version": SCHEMA_VERSION, "seed": seed,
                  "experiment": cfg.experiment, "method": cfg.method}
        records = [header] + [{"record": "epoch", **r} for r in report.to_dict()["epochs"]]
        records.append({"record": "final", **result})
        _write_lines(out_dir / "report.jsonl", records)
        if failure is None:
            save_checkpoint(out_dir / "checkpoint.npz", model, {"experiment": cfg.to_dict(), "seed": seed})
            feats = model.feature_values(data.inputs)
            dg.write_sequence(out_dir / "features.seq",
                              dg.LabeledSequence(feats, data.labels, data.domain_trace))
        meta = {"alpha": tcfg.alpha, "mode": tcfg.mode, "gamma": tcfg.gamma, "seed": seed}
        if report.warm_start_trace is not None:
            _write_lines(out_dir / "trace-warm-start.jsonl",
                         trace_records(report.warm_start_trace, snapshot="warm-start", **meta))
        if report.final_trace is not None:
            _write_lines(out_dir / "trace-final.jsonl",
                         trace_records(report.final_trace, snapshot="final", **meta))
    if report.final_trace is not None:
        result["final_triggered"] = report.final_trace.triggered
    if report.warm_start_trace is not None:
        result["warm_start_triggered"] = report.warm_start_trace.triggered
    return result


def _aggregate(results: list[dict]) -> dict:
    ok = [r for r in results if r["error"] is None]
    out = {"runs": len(results), "failed": len(results) - len(ok)}
    for key in ("train_accuracy", "test_accuracy"):
        vals = np.array([r[key] for r in ok if r[key] is not None], dtype=float)
        out[key] = {"mean": float(vals.mean()) if len(vals) else None,
                    "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


def cmd_train(args) -> int:
    cfg = build_config(args)
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
    out = Path(args.output or f"runs/{cfg.experiment}-{cfg.method}")
    overrides = cfg.overrides()
    if overrides:
        print("overrides: " + _dumps(overrides))
    if cfg.uses_synthetic_digits():
        print("note: no MNIST directory given; using synthetic digits (numbers not comparable to MNIST)")
    results = []
    for seed in seeds:
        r = run_training(cfg, seed, out / f"seed-{seed}")
        results.append(r)
        status = f"failed: {r['error']}" if r["error"] else \
            f"train {r['train_accuracy']:.4f}  test {r['test_accuracy']:.4f}"
        print(f"seed {seed}: {status}")
    summary = {"schema": "drm-summary", "schema_version": SCHEMA_VERSION, "effective_config": cfg.to_dict(),
               "overrides": overrides, "seeds": seeds, "results": results, "aggregate": _aggregate(results)}
    _write_lines(out / "summary.jsonl", [summary])
    agg = summary["aggregate"]
    if agg["train_accuracy"]["mean"] is not None:
        print(f"mean over {len(seeds) - agg['failed']} seeds: train {agg['train_accuracy']['mean']:.4f} "
              f"± {agg['train_accuracy']['sd']:.4f}  test {agg['test_accuracy']['mean']:.4f} "
              f"± {agg['test_accuracy']['sd']:.4f}")
    return EXIT_ERROR if agg["failed"] else EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    user_cfg = build_config(args) if (args.config or args.experiment or args.set) else None
    if args.oracle_x1:
        cfg = user_cfg or ExperimentConfig.preset("toy2d")
        if cfg.experiment != "toy2d":
            raise CLIError("--oracle-x1 only applies to toy2d")
        data = cfg.load_data(args.seed, args.split)
        correct = (data.inputs[:, 0] >= 0).astype(int) == data.labels
        acc, n, source = float(np.mean(correct)), len(data), "oracle-x1"
    else:
        if not args.checkpoint:
            raise CLIError("eval needs --checkpoint (or --oracle-x1)")
        model, meta = load_checkpoint(args.checkpoint)
        stored = ExperimentConfig.from_dict(meta["experiment"]) if "experiment" in meta else None
        cfg = user_cfg or stored
        if cfg is None:
            raise CLIError("checkpoint carries no config; pass --experiment or --config")
        data = cfg.load_data(args.seed, args.split)
        expected = cfg.build_model(0, data.inputs.shape[1:]).arch
        if expected != model.arch:
            raise CLIError(f"architecture mismatch: checkpoint has {model.arch}, config expects {expected}")
        acc, n, source = evaluate(model, data), len(data), str(args.checkpoint)
    se = float(np.sqrt(acc * (1 - acc) / n))
    record = {"schema": "drm-eval", "schema_version": SCHEMA_VERSION, "split": args.split,
              "seed": args.seed, "source": source, "accuracy": acc, "n": n, "se": se}
    if args.output:
        _write_lines(args.output, [record])
    print(f"{args.split} accuracy {acc:.4f} (n={n}, se={se:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def _format_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _cell_label(combo: dict) -> str:
    return ", ".join(f"{k}={_format_value(v)}" for k, v in combo.items())


def _sweep_cell(cfg_dict: dict, seed: int, out_dir: str) -> dict:
    try:
        return run_training(ExperimentConfig.from_dict(cfg_dict), seed, Path(out_dir), with_traces=False)
    except Exception as e:  # noqa: BLE001 -- reported per cell, the sweep goes on
        return {"seed": seed, "train_accuracy": None, "test_accuracy": None,
                "error": f"{type(e).__name__}: {e}"}


def sweep_table(cells: list[dict]) -> str:
    """Markdown table with one column per grid point, ``train ‖ test`` means."""
    head = "| | " + " | ".join(c["label"] for c in cells) + " |"
    rule = "|" + "---|" * (len(cells) + 1)

    def fmt(c):
        agg = c["aggregate"]
        if agg["train_accuracy"]["mean"] is None:
            return "FAILED"
        mark = " (partial)" if agg["failed"] else ""
        return f"{agg['train_accuracy']['mean']:.2f} ‖ {agg['test_accuracy']['mean']:.2f}{mark}"

    row = "| Success (Train ‖ Test) | " + " | ".join(fmt(c) for c in cells) + " |"
    return "\n".join([head, rule, row]) + "\n"


def run_sweep(cfg: ExperimentConfig, grid: dict, seeds: list[int], out: Path, workers: int = 1) -> list[dict]:
    base = cfg.to_dict()
    for key in grid:
        if key not in base:
            raise CLIError(f"grid parameter {key!r} is not a config field")
    combos = [dict(zip(grid, values)) for values in itertools.product(*grid.values())]
    jobs = []
    for ci, combo in enumerate(combos):
        cell_cfg = ExperimentConfig.from_dict({**base, **combo}).to_dict()
        for seed in seeds:
            jobs.append((ci, cell_cfg, seed, str(out / "cells" / f"cell-{ci}" / f"seed-{seed}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, c, s, d) for _, c, s, d in jobs]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_sweep_cell(c, s, d) for _, c, s, d in jobs]
    cells = []
    for ci, combo in enumerate(combos):
        results = [r for (cj, *_), r in zip(jobs, outcomes) if cj == ci]
        cells.append({"label": _cell_label(combo), "params": combo, "results": results,
                      "aggregate": _aggregate(results)})
    return cells


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    grid = {}
    for item in args.grid:
        key, values = parse_assignment(item)
        grid[key] = [_parse_value(v) for v in values.split(",")]
    if not grid:
        raise CLIError("sweep needs at least one --grid key=v1,v2,...")
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.sweep_seeds
    out = Path(args.output or f"runs/sweep-{cfg.experiment}")
    cells = run_sweep(cfg, grid, seeds, out, _workers(args))
    header = {"schema": "drm-sweep", "schema_version": SCHEMA_VERSION, "effective_config": cfg.to_dict(),
              "overrides": cfg.overrides(), "grid": grid, "seeds": seeds}
    _write_lines(out / "sweep.jsonl", [header] + cells)
    table = sweep_table(cells)
    (out / "table.md").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _add_config_args(p, experiment_default=None):
    p.add_argument("--experiment", choices=EXPERIMENTS, default=experiment_default)
    p.add_argument("--config", help="JSON file with config fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--data-dir", help="directory holding the MNIST IDX files")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drm", description="Conformal-martingale shift detection and DRM training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run the hard detector over a sequence")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="sequence file (see `generate`)")
    src.add_argument("--generate", choices=("toy2d", "colored-mnist"), help="use a generated training sequence")
    p.add_argument("--T", type=int, help="length of a generated sequence")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--mode", choices=MODES, default="concept")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="seed of the tie-breaking draws")
    p.add_argument("--output", help="trace file (default: stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("generate", help="write a generated sequence file")
    _add_config_args(p, "toy2d")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--T", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train ERM or DRM models")
    _add_config_args(p, "toy2d")
    p.add_argument("--method", choices=("drm", "erm"))
    p.add_argument("--seeds", help="e.g. 0,1,2 or 0-9 (default: preset)")
    p.add_argument("--output", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint (or the x1 oracle)")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seed", type=int, default=0, help="data seed")
    p.add_argument("--oracle-x1", action="store_true", help="evaluate the rule 1[x1 >= 0] (toy2d)")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid x seeds, averaged per grid point")
    _add_config_args(p, "toy2d")
    p.add_argument("--method", choices=("drm", "erm"))
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, help=f"parallel cells (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, KeyError, OSError, TrainingDiverged) as e:
        print(f"drm: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
