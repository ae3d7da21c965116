"""Command-line front end.

    dechw run CONFIG [--seed N]... [--out DIR] [--override section.key=value]...
    dechw compare CONFIG --strategies dechetero,dechw --seeds 0,1 --milestones 0.5,0.75,0.9,0.95

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 I/O failure.
``DECHW_WORKERS`` sets the per-round worker pool size.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, data, engine
from .config import ConfigError, ExperimentConfig, apply_override, parse_config, to_dict
from .errors import IngestionError

log = logging.getLogger("dechw")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


class OutputError(Exception):
    pass


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__} ({out.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _prepare_out_dir(path: Path) -> Path:
    """Create ``path`` and prove it is writable before anything is written there."""
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {path} is not writable: {exc.strerror or exc}") from exc
    return path


class Manifest:
    """run manifest: written before the first round, finalised after the last."""

    def __init__(self, path: Path, config: ExperimentConfig, seeds: List[int], command: str):
        self.path = path
        self.doc = {
            "command": command,
            "version": _version(),
            "config": to_dict(config),
            "seeds": seeds,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def add_output(self, path: Path) -> None:
        self.doc["outputs"].append(path.name)

    def finish(self, status: str = "ok") -> None:
        self.doc["finished"] = _now()
        self.doc["status"] = status
        self.doc["outputs"] = [name for name in self.doc["outputs"] if (self.path.parent / name).exists()]
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2) + "\n")


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    for item in getattr(args, "override", None) or []:
        cfg = apply_override(cfg, item)
    workers = os.environ.get("DECHW_WORKERS")
    if workers:
        try:
            cfg = cfg.replace(run={"workers": int(workers)})
        except ValueError:
            raise ConfigError(f"DECHW_WORKERS must be an integer, got {workers!r}") from None
    return cfg


def _suffixed(name: str, suffix: str) -> str:
    stem, dot, ext = name.rpartition(".")
    return f"{stem}{suffix}.{ext}" if dot else f"{name}{suffix}"


def run_one(cfg: ExperimentConfig, out_dir: Path, suffix: str = "") -> tuple:
    """Run a single experiment, writing metrics and partition stats into ``out_dir``."""
    metrics_path = out_dir / _suffixed(cfg.output.metrics, suffix)
    stats_path = out_dir / _suffixed(cfg.output.partition_stats, suffix)
    sim = engine.initialize(cfg)
    table = data.partition_stats([n.partition for n in sim.nodes], sim.train.labels, sim.train.num_classes)
    data.write_partition_csv(table, stats_path)
    rows = engine.run_experiment(cfg, metrics_path, sim=sim)
    return rows, metrics_path, stats_path


def cmd_run(args) -> int:
    cfg = _load(args)
    out_dir = _prepare_out_dir(Path(args.out or cfg.output.dir))
    seeds = args.seed or [cfg.run.seed]
    manifest = Manifest(out_dir / cfg.output.manifest, cfg, seeds, "run")
    try:
        for seed in seeds:
            run_cfg = cfg.replace(run={"seed": seed})
            suffix = f"_seed{seed}" if args.seed else ""
            rows, metrics_path, stats_path = run_one(run_cfg, out_dir, suffix)
            manifest.add_output(metrics_path)
            manifest.add_output(stats_path)
            last = rows[-1]
            print(f"seed {seed}: {len(rows)} rounds evaluated, final mean accuracy {last.mean_acc:.4f} "
                  f"-> {metrics_path}")
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish()
    return EXIT_OK


def _fmt_round(value) -> str:
    return "-" if value is None else f"{value:g}"


def summarize(results: dict, milestones: List[float], last_k: int, relative: bool) -> List[dict]:
    """One summary row per strategy from ``{strategy: [metrics per seed]}``.

    Milestone cells are the mean over seeds of the first round reaching the
    milestone, or ``None`` when any seed never reaches it.
    """
    rows = []
    for strategy, runs in results.items():
        reached = []
        for series in runs:
            ref = max(m.mean_acc for m in series) if relative else None
            reached.append(engine.rounds_to_threshold(series, milestones, reference=ref))
        cells = []
        for k in range(len(milestones)):
            col = [r[k] for r in reached]
            cells.append(None if any(c is None for c in col) else float(np.mean(col)))
        tail = np.array([m.mean_acc for series in runs for m in series[-last_k:]])
        rows.append({"strategy": strategy, "seeds": len(runs), "milestones": cells,
                     "final_mean": float(tail.mean()), "final_std": float(tail.std())})
    return rows


def write_summary(rows: List[dict], milestones: List[float], path: Path, relative: bool) -> None:
    prefix = "rel" if relative else "acc"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy", "seeds"] + [f"rounds_{prefix}_{m:g}" for m in milestones]
                        + ["final_mean", "final_std"])
        for row in rows:
            writer.writerow([row["strategy"], row["seeds"]] + [_fmt_round(c) for c in row["milestones"]]
                            + [f"{row['final_mean']:.6f}", f"{row['final_std']:.6f}"])


def print_summary(rows: List[dict], milestones: List[float], relative: bool, last_k: int) -> None:
    label = "of best" if relative else "acc"
    heads = ["strategy"] + [f"{m:g} {label}" for m in milestones] + [f"last-{last_k} mean +- std"]
    table = [heads]
    for row in rows:
        table.append([row["strategy"]] + [_fmt_round(c) for c in row["milestones"]]
                     + [f"{row['final_mean']:.4f} +- {row['final_std']:.4f}"])
    widths = [max(len(r[i]) for r in table) for i in range(len(heads))]
    for r in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())


def _csv_list(text: str, cast) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_compare(args) -> int:
    cfg = _load(args)
    strategies = _csv_list(args.strategies, str)
    seeds = _csv_list(args.seeds, int) if args.seeds else [cfg.run.seed]
    milestones = _csv_list(args.milestones, float)
    for s in strategies:
        cfg.replace(aggregation={"strategy": s})  # validates the name
    out_dir = _prepare_out_dir(Path(args.out or cfg.output.dir))
    manifest = Manifest(out_dir / cfg.output.manifest, cfg, seeds, "compare")
    results = {}
    try:
        for k, strategy in enumerate(strategies):
            runs = []
            for seed in seeds:
                run_cfg = cfg.replace(aggregation={"strategy": strategy}, run={"seed": seed})
                rows, metrics_path, stats_path = run_one(run_cfg, out_dir, f"_{k}_{strategy}_seed{seed}")
                manifest.add_output(metrics_path)
                manifest.add_output(stats_path)
                runs.append(rows)
            key = strategy if strategy not in results else f"{strategy}#{k}"
            results[key] = runs
        rows = summarize(results, milestones, args.last_k, args.relative)
        summary_path = out_dir / "summary.csv"
        write_summary(rows, milestones, summary_path, args.relative)
        manifest.add_output(summary_path)
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish()
    print_summary(rows, milestones, args.relative, args.last_k)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dechw", description="Decentralized federated learning simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment (or a seed sweep)")
    run.add_argument("config")
    run.add_argument("--seed", type=int, action="append", help="master seed; repeat for a sweep")
    run.add_argument("--out", help="output directory (default: output.dir from the config)")
    run.add_argument("--override", action="append", metavar="KEY=VALUE", help="e.g. training.lr=0.1")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run strategies x seeds and tabulate rounds-to-threshold")
    cmp_.add_argument("config")
    cmp_.add_argument("--strategies", default="dechetero,dechw")
    cmp_.add_argument("--seeds", default=None, help="comma-separated master seeds")
    cmp_.add_argument("--milestones", default="0.5,0.75,0.9,0.95")
    cmp_.add_argument("--relative", action="store_true",
                      help="milestones are fractions of each run's best mean accuracy")
    cmp_.add_argument("--last-k", type=int, default=10, help="window for the final accuracy column")
    cmp_.add_argument("--out")
    cmp_.add_argument("--override", action="append", metavar="KEY=VALUE")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OutputError, IngestionError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
