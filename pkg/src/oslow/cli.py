"""Command-line front end: ``oslow gen|train|bench|intervene|eval``.

Exit codes: 0 success, 1 usage or I/O problems, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import BENCH_METHODS, load_config, train_config
from .exceptions import CheckpointError, ConfigError, NumericalError
from .intervention import FlowGenerator, ScmGenerator, parse_grid, sweep, sweep_csv
from .io import (
    Manifest,
    load_checkpoint,
    read_csv,
    read_json,
    read_sidecar,
    regenerate,
    save_checkpoint,
    sidecar_dag,
    sidecar_path,
    write_dataset,
    write_result,
    atomic_write_text,
)
from .metrics import MetricRecord, aggregate, aggregate_csv, aggregate_json, cbc, is_valid_ordering
from .scm_bench import benchmark_suite, expand_suite, generate
from .trainer import train, varsort

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _worker_count() -> int:
    raw = os.environ.get("OSLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"OSLOW_THREADS must be an integer, got {raw!r}")


def _override_seed(cfg: dict, seed) -> dict:
    if seed is not None:
        cfg["seed"] = seed
    return cfg


# ---------------------------------------------------------------- gen
def cmd_gen(args) -> int:
    cfg = _override_seed(load_config(args.config), args.seed)
    if args.suite:
        cfg["gen"]["suite"] = args.suite
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "datasets"
    data_dir.mkdir(exist_ok=True)
    manifest = Manifest(out / "manifest.json", cfg, cfg["seed"])
    descriptors = expand_suite(benchmark_suite(cfg["gen"]["suite"]), cfg["seed"], cfg["gen"]["num_samples"])
    for _, desc in descriptors:
        csv_path, side = write_dataset(data_dir, generate(desc), desc)
        manifest.add_file(csv_path)
        manifest.add_file(side)
    manifest.save(finished=True)
    print(f"wrote {len(descriptors)} datasets to {data_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- train
def _dataset_noise(csv_path: Path) -> str | None:
    side = sidecar_path(csv_path)
    if side.exists():
        return read_sidecar(side)["descriptor"]["noise"]
    return None


def cmd_train(args) -> int:
    csv_path = Path(args.dataset)
    if not csv_path.is_file():
        raise FileNotFoundError(f"dataset not found: {csv_path}")
    cfg = _override_seed(load_config(args.config), args.seed)
    if args.method:
        cfg["train"]["method"] = args.method
    if args.epochs:
        cfg["train"]["epochs"] = args.epochs
    data = read_csv(csv_path)
    tcfg = train_config(cfg, data.shape[1], _dataset_noise(csv_path))
    result = train(data, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = csv_path.stem
    result_path, ckpt_path = out / f"{stem}.result.json", out / f"{stem}.ckpt.npz"
    write_result(result_path, result, {"dataset": str(csv_path)})
    save_checkpoint(ckpt_path, result)
    manifest = Manifest.load_or_create(out / "manifest.json", cfg, cfg["seed"])
    manifest.add_file(csv_path)
    manifest.add_file(result_path)
    manifest.add_file(ckpt_path)
    manifest.add_record({"dataset": str(csv_path), "method": tcfg.method, "seed": tcfg.seed,
                         "ordering": [v + 1 for v in result.final_ordering],
                         "proxy_final": result.proxy_final})
    manifest.save(finished=True)
    print(json.dumps({"ordering": [v + 1 for v in result.final_ordering], "proxy_final": result.proxy_final}))
    if result.cheat_report is not None:
        print(json.dumps({"cheat_report": result.cheat_report}))
    return EXIT_OK


# ---------------------------------------------------------------- bench
def _bench_job(job: tuple) -> dict:
    csv_path, method, seed, cfg = job
    side = read_sidecar(sidecar_path(csv_path))
    dag = sidecar_dag(side)
    data = read_csv(csv_path)
    dataset_id = Path(csv_path).stem
    start = time.perf_counter()
    proxy = float("nan")
    try:
        if method == "varsort":
            ordering = varsort(data)
        else:
            run_cfg = dict(cfg, train=dict(cfg["train"]))
            if method != "oslow":
                run_cfg["train"]["method"] = method
            result = train(data, train_config(run_cfg, data.shape[1], side["descriptor"]["noise"], seed))
            ordering, proxy = result.final_ordering, result.proxy_final
    except NumericalError as exc:
        return MetricRecord(dataset_id, method, seed, None, False, side["family"],
                            error=f"numeric: {exc}").to_dict()
    elapsed = time.perf_counter() - start
    vacuous = not dag.edges
    score = None if vacuous else cbc(ordering, dag)
    return MetricRecord(dataset_id, method, seed, score, is_valid_ordering(ordering, dag), side["family"],
                        proxy, elapsed, vacuous).to_dict()


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    methods = args.methods.split(",") if args.methods else cfg["bench"]["methods"]
    bad = [m for m in methods if m not in BENCH_METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(BENCH_METHODS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg["bench"]["seeds"]
    if args.epochs:
        cfg["train"]["epochs"] = args.epochs
    data_dir = Path(args.data)
    csvs = sorted(data_dir.glob("*.csv"))
    if not csvs:
        raise FileNotFoundError(f"no datasets in {data_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load_or_create(out / "manifest.json", cfg, cfg["seed"])
    done = manifest.completed()
    # drop stale error rows; they are retried
    manifest.data["records"] = [r for r in manifest.records if not r.get("error")]
    jobs = [(str(p), m, s, cfg) for p in csvs for m in methods for s in seeds if (p.stem, m, s) not in done]
    for p in csvs:
        manifest.add_file(p)
    workers = _worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_bench_job, jobs):
                manifest.add_record(rec)
                manifest.save()
    else:
        for job in jobs:
            manifest.add_record(_bench_job(job))
            manifest.save()
    records = [MetricRecord.from_dict(r) for r in manifest.records]
    rows = aggregate(records)
    atomic_write_text(out / "aggregate.csv", aggregate_csv(rows))
    atomic_write_text(out / "aggregate.json", aggregate_json(rows) + "\n")
    manifest.add_file(out / "aggregate.csv")
    manifest.add_file(out / "aggregate.json")
    manifest.save(finished=True)
    sys.stdout.write(aggregate_csv(rows))
    failures = [r for r in records if r.error]
    if failures:
        print(f"{len(failures)} run(s) failed; see {manifest.path}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- intervene
def cmd_intervene(args) -> int:
    cfg = _override_seed(load_config(args.config), args.seed)
    opts = cfg["intervene"]
    target = args.target if args.target is not None else opts["target"]
    responses = [int(r) for r in args.responses.split(",")] if args.responses else opts["responses"]
    grid = parse_grid(args.grid if args.grid else opts["grid"])
    num_samples = args.num_samples or opts["num_samples"]
    level = args.level or opts["level"]
    if args.truth:
        ds, _ = regenerate(args.truth)
        generator = ScmGenerator(ds.spec)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        generator = FlowGenerator(ckpt.model, ckpt.ordering, ckpt.stats)
    d = generator.d
    if not 1 <= target <= d:
        raise ConfigError(f"target {target} out of range 1..{d}")
    if responses is not None and any(not 1 <= r <= d for r in responses):
        raise ConfigError(f"responses must lie in 1..{d}")
    rows = sweep(generator, target - 1, grid, None if responses is None else [r - 1 for r in responses],
                 num_samples, level, cfg["seed"])
    text = sweep_csv(rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    result = read_json(args.result)
    ordering = [int(v) - 1 for v in result["final_ordering"]]
    side = read_sidecar(args.sidecar)
    dag = sidecar_dag(side)
    if len(ordering) != dag.d:
        raise ValueError(f"ordering has {len(ordering)} variables, graph has {dag.d}")
    vacuous = not dag.edges
    rec = MetricRecord(Path(args.sidecar).stem, result.get("config", {}).get("method", "oslow"),
                       int(result.get("seed", 0)), None if vacuous else cbc(ordering, dag),
                       is_valid_ordering(ordering, dag), side.get("family", ""),
                       float(result["proxy_trace"][-1]) if result.get("proxy_trace") else float("nan"),
                       float(result.get("wall_time_s", 0.0)), vacuous)
    print(json.dumps(rec.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oslow", description="Causal ordering discovery with permutation-conditioned flows.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic benchmark suite")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--suite", choices=["small", "large"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="learn an ordering for one dataset")
    p.add_argument("dataset", help="CSV file with header x1,...,xd")
    p.add_argument("--config")
    p.add_argument("--out", default=".", help="directory for result JSON and checkpoint")
    p.add_argument("--method", choices=["gumbel-top-k", "gumbel-sinkhorn-st", "soft-sinkhorn"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run methods over a generated suite and aggregate CBC")
    p.add_argument("--data", required=True, help="directory of dataset CSVs with sidecars")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--methods", help=f"comma list from {','.join(BENCH_METHODS)}")
    p.add_argument("--seeds", help="comma list of integer seeds")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("intervene", help="estimate E[x | do(x_target = y)] over a grid")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained model checkpoint (.npz)")
    src.add_argument("--truth", help="dataset sidecar; use the ground-truth SCM")
    p.add_argument("--target", type=int, help="1-based intervened variable")
    p.add_argument("--responses", help="comma list of 1-based response variables (default all)")
    p.add_argument("--grid", help="start:stop:count or comma list")
    p.add_argument("--num-samples", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("eval", help="score a result JSON against a dataset sidecar")
    p.add_argument("result")
    p.add_argument("sidecar")
    p.set_defaults(func=cmd_eval)
    return parser


def _join_negative_values(argv: list[str]) -> list[str]:
    # "--grid -2.5:2.5:21" would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--grid" and i + 1 < len(argv):
            out.append(f"--grid={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv=None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"oslow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"oslow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
