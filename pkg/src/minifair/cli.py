"""Experiment runner: strategy x mode x seed grids over one dataset.

Writes one trace CSV per run, a checkpoint summary table and a long-format
file for plotting.  Configuration comes from a JSON file; command-line flags
override it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing as mp
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from minifair import ingest, mf
from minifair.evaluation import (
    SimulationTrace,
    csv_text,
    trace_rows,
    trace_to_csv,
    write_atomic,
    CSV_HEADER,
)
from minifair.simulation import SimulationConfig, run
from minifair.strategies import STRATEGIES, GreedyExtendOptions

log = logging.getLogger("minifair")

MODES = ("original", "equal-ratio")
DEFAULT_CHECKPOINTS = (0, 50, 100, 150, 200, 250, 300)
PLOT_SERIES = ("rmse_all", "rmse_protected", "rmse_unprotected", "rolling_w10")


@dataclass
class ExperimentConfig:
    dataset_path: str = "data/ml-1m"
    dataset_format: str = "ml-1m"
    output_dir: str = "results"
    strategies: list[str] = field(default_factory=lambda: ["random"])
    modes: list[str] = field(default_factory=lambda: ["original"])
    seeds: list[int] = field(default_factory=lambda: [0])
    split: ingest.SplitConfig = field(default_factory=ingest.SplitConfig)
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    checkpoints: list[int] = field(default_factory=lambda: list(DEFAULT_CHECKPOINTS))
    user_fraction: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if not self.strategies:
            raise ValueError("strategies must be non-empty")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "split" in data:
        data["split"] = _build(ingest.SplitConfig, data["split"])
    if "sim" in data:
        sim = dict(data["sim"])
        if "hyperparams" in sim:
            sim["hyperparams"] = _build(mf.MfHyperParams, sim["hyperparams"])
        if "ge" in sim:
            sim["ge"] = _build(GreedyExtendOptions, sim["ge"])
        data["sim"] = _build(SimulationConfig, sim)
    return _build(ExperimentConfig, data)


def run_name(strategy: str, mode: str, seed: int) -> str:
    return f"{strategy}_{mode}_seed{seed}"


def _run_config(cfg: ExperimentConfig, strategy: str, mode: str, seed: int) -> SimulationConfig:
    hp = dataclasses.replace(cfg.sim.hyperparams, seed=seed)
    return dataclasses.replace(cfg.sim, strategy=strategy, equal_ratio=(mode == "equal-ratio"),
                               seed=seed, hyperparams=hp)


# Read-only dataset shared with forked workers.
_SHARED: dict = {}


def _one_run(job: tuple[str, str, int]) -> tuple[str, str, int, SimulationTrace, str | None]:
    strategy, mode, seed = job
    cfg: ExperimentConfig = _SHARED["cfg"]
    ds, train, test = _SHARED["ds"], _SHARED["train"], _SHARED["test"]
    name = run_name(strategy, mode, seed)
    out = Path(cfg.output_dir)
    trace = SimulationTrace()
    t0 = time.perf_counter()

    def progress(p):
        print(f"[{name}] it={p.iteration} |K|={p.n_known} rmse={p.rmse_all:.4f} "
              f"f={p.rmse_protected:.4f} m={p.rmse_unprotected:.4f}", file=sys.stderr, flush=True)

    try:
        run(train.copy(), test, ds.groups, _run_config(cfg, strategy, mode, seed),
            ds.n_users, ds.n_items, trace=trace, progress=progress)
    except Exception as exc:  # keep what we have and report
        if trace.points:
            trace_to_csv(trace, out / f"{name}.csv.partial")
        return strategy, mode, seed, trace, f"{type(exc).__name__}: {exc}"
    trace_to_csv(trace, out / f"{name}.csv")
    print(f"[{name}] done in {time.perf_counter() - t0:.1f}s", file=sys.stderr, flush=True)
    return strategy, mode, seed, trace, None


def summary_rows(results, checkpoints) -> list[list[str]]:
    """Table-style rows: per run, one protected and one unprotected line.

    Cells are read from the traces; ``*`` marks p < 0.01 at that checkpoint.
    """
    rows = []
    for strategy, mode, seed, trace in results:
        for group, attr in (("protected", "rmse_protected"), ("unprotected", "rmse_unprotected")):
            row = [strategy, mode, str(seed), group]
            for c in checkpoints:
                p = trace.at(c)
                if p is None:
                    row.append("")
                else:
                    row.append(f"{getattr(p, attr):.6f}" + ("*" if p.p_value < 0.01 else ""))
            rows.append(row)
    return rows


def emit_summary(results, checkpoints, path) -> None:
    header = ["strategy", "mode", "seed", "group"] + [f"i={c}" for c in checkpoints]
    write_atomic(path, csv_text(header, summary_rows(results, checkpoints)))


def emit_plot_data(traces: list[SimulationTrace], path) -> None:
    """Long-format ``strategy,mode,seed,iteration,series,value`` rows."""
    rows = []
    col = {name: k for k, name in enumerate(CSV_HEADER)}
    source = {"rmse_all": "rmse_all", "rmse_protected": "rmse_protected",
              "rmse_unprotected": "rmse_unprotected", "rolling_w10": "rolling_rmse_all_w10"}
    for tr in traces:
        for r in trace_rows(tr):
            for series in PLOT_SERIES:
                rows.append([tr.strategy, tr.mode, str(tr.seed), r[col["iteration"]], series, r[col[source[series]]]])
    write_atomic(path, csv_text(["strategy", "mode", "seed", "iteration", "series", "value"], rows))


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the whole grid; returns a summary dict with any failures listed."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("loading %s (%s)", cfg.dataset_path, cfg.dataset_format)
    ds = ingest.load_dataset(cfg.dataset_path, cfg.dataset_format, cfg.split.k_core)
    if cfg.user_fraction < 1.0:
        ds = ingest.subsample_users(ds, cfg.user_fraction, cfg.split.seed, cfg.split.k_core)
    log.info("dataset: %s", ds.stats)
    train, test = ingest.split_dataset(ds, cfg.split)
    _SHARED.update(cfg=cfg, ds=ds, train=train, test=test)

    jobs = [(s, m, seed) for s in cfg.strategies for m in cfg.modes for seed in cfg.seeds]
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads, mp_context=mp.get_context("fork")) as pool:
            finished = list(pool.map(_one_run, jobs))
    else:
        finished = [_one_run(j) for j in jobs]

    failures = {run_name(s, m, seed): err for s, m, seed, _, err in finished if err}
    ok = [(s, m, seed, tr) for s, m, seed, tr, err in finished if not err]
    emit_summary(ok, cfg.checkpoints, out / "summary.csv")
    emit_plot_data([tr for *_, tr in ok], out / "plot_data.csv")
    summary = {"dataset": ds.stats, "runs": len(jobs), "completed": len(ok), "failures": failures}
    write_atomic(out / "run_info.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _split_list(values: list[str] | None) -> list[str] | None:
    if not values:
        return None
    return [v for chunk in values for v in chunk.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minifair", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--strategy", action="append", help="strategy name(s); repeat or comma-separate")
    p.add_argument("--mode", action="append", help="original and/or equal-ratio")
    p.add_argument("--seed", action="append", help="run seed(s)")
    p.add_argument("--dataset", help="directory with ratings/users files")
    p.add_argument("--format", dest="dataset_format", choices=ingest.FORMATS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--query-size", type=int)
    p.add_argument("--user-fraction", type=float, help="random share of users to keep")
    p.add_argument("--checkpoints", help="comma-separated iterations for the summary table")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    if (v := _split_list(args.strategy)):
        data["strategies"] = v
    if (v := _split_list(args.mode)):
        data["modes"] = v
    if (v := _split_list(args.seed)):
        data["seeds"] = [int(s) for s in v]
    for flag, key in (("dataset", "dataset_path"), ("dataset_format", "dataset_format"),
                      ("out", "output_dir"), ("user_fraction", "user_fraction")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    if args.checkpoints:
        data["checkpoints"] = [int(c) for c in args.checkpoints.split(",")]
    threads = args.threads or data.get("threads") or int(os.environ.get("MINIFAIR_THREADS", "1"))
    data["threads"] = threads
    sim = dict(data.get("sim", {}))
    for flag, key in (("max_iterations", "max_iterations"), ("eval_every", "eval_every"),
                      ("query_size", "query_size")):
        if getattr(args, flag) is not None:
            sim[key] = getattr(args, flag)
    data["sim"] = sim
    return config_from_dict(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        summary = run_experiment(cfg)
    except Exception as exc:
        print(f"minifair: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for name, err in summary["failures"].items():
        print(f"minifair: run {name} failed: {err}", file=sys.stderr)
    return 1 if summary["failures"] else 0


if __name__ == "__main__":
    sys.exit(main())
