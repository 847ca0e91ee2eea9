"""Command line: ``forgetlab run|analyze|plots|probe``.

Exit status is 0 on success, 1 when any run (or evaluation) failed and 2 for
configuration or usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import analysis as A
from . import metrics as M
from .experiment import (
    OUTPUT_ENV,
    BenchmarkSpec,
    ConfigError,
    load_config,
    load_results,
    probe_seed,
    run_sequence,
    run_sweep,
)
from .nn import load_extractor

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2

TABLE_METRICS = ("avg_fgt", "avg_acc", "avg_lacc")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgetlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run every learner x seed of a sweep config")
    r.add_argument("config")
    r.add_argument("--seeds", type=_int_list, help="override seeds, e.g. 0,1,2")
    r.add_argument("--workers", type=int, help="parallel worker processes")
    r.add_argument("--output-dir", help=f"results root (default: config, then ${OUTPUT_ENV}, then ./results)")
    r.add_argument("--no-resume", action="store_true", help="rerun even when a matching result exists")

    a = sub.add_parser("analyze", help="aggregate a sweep directory and compute correlations")
    a.add_argument("results_dir")
    a.add_argument("--mode", default="probe", choices=("probe", "finetune"))
    a.add_argument("--n-perm", type=int, default=A.N_PERMUTATIONS)

    pl = sub.add_parser("plots", help="write plot-ready CSV tables for a sweep directory")
    pl.add_argument("results_dir")
    pl.add_argument("--out", help="destination (default: <results_dir>/plots)")
    pl.add_argument("--mode", default="probe", choices=("probe", "finetune"))
    pl.add_argument("--n-perm", type=int, default=A.N_PERMUTATIONS)

    pr = sub.add_parser("probe", help="k-shot probe a saved feature extractor on one task")
    pr.add_argument("checkpoint", help="phi_after_task_<j> file inside a sweep directory")
    pr.add_argument("task", type=int, help="task position in the run's task order")
    pr.add_argument("--k", type=int, default=5)
    pr.add_argument("--seed", type=int, help="run seed (default: the checkpoint's seed directory)")
    pr.add_argument("--probe-seed", type=int, help="k-shot draw seed (default: the sweep's own)")
    return p


def _load_or_exit(path: str):
    try:
        return load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def cmd_run(args) -> int:
    cfg = _load_or_exit(args.config)
    if cfg is None:
        return EXIT_CONFIG
    overrides = {}
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.workers:
        overrides["workers"] = args.workers
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    try:
        cfg = replace(cfg, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_sweep(cfg, resume=not args.no_resume)
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"FAILED {r.run_id}: {r.error.splitlines()[0]}", file=sys.stderr)
    ok = [r for r in results if not r.error]
    if ok:
        print(A.format_table(A.aggregate(ok), TABLE_METRICS))
    print(f"{len(ok)} runs ok, {len(failed)} failed -> {Path(cfg.output_dir) / cfg.name}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


def _results_or_none(root: str):
    p = Path(root)
    if not p.is_dir():
        print(f"not a directory: {root}", file=sys.stderr)
        return None
    return load_results(p)


def cmd_analyze(args) -> int:
    results = _results_or_none(args.results_dir)
    if results is None:
        return EXIT_CONFIG
    ok = [r for r in results if not r.error and r.report is not None]
    if not ok:
        print("no successful runs found", file=sys.stderr)
        return EXIT_RUN_FAILED
    agg = A.aggregate(ok)
    ks = sorted({k for r in ok for k in r.report.avg_fwt.get(args.mode, {})})
    metrics = list(TABLE_METRICS) + [f"avg_fwt_{args.mode}_k{k}" for k in ks]
    print(A.format_table(agg, metrics))
    corr = A.correlation_report(ok, args.mode, args.n_perm)
    print()
    print(f"{'metric':10s}{'k':>4s}{'pooling':>10s}{'rho':>9s}{'p':>10s}{'n':>5s}")
    for c in corr:
        k = "" if c.k is None else str(c.k)
        print(f"{c.metric:10s}{k:>4s}{c.pooling:>10s}{c.rho:9.3f}{c.p:10.4f}{c.n:5d}")
    summary = {
        "aggregate": {l: {m: asdict(s) for m, s in ms.items()} for l, ms in agg.items()},
        "correlation": [asdict(c) for c in corr],
    }
    (Path(args.results_dir) / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_RUN_FAILED if len(ok) < len(results) else EXIT_OK


def _sweep_labels(root: Path) -> tuple[str, str]:
    """(dataset, init) labels from a sweep's config.json, blank when absent."""
    try:
        raw = json.loads((root / "config.json").read_text())
    except (OSError, ValueError):
        return "", ""
    b = raw.get("benchmark", {})
    return f"{b.get('kind', '')}-{b.get('n_tasks', '')}", raw.get("init", "")


def cmd_plots(args) -> int:
    results = _results_or_none(args.results_dir)
    if results is None:
        return EXIT_CONFIG
    ok = [r for r in results if not r.error and r.report is not None]
    if not ok:
        print("no successful runs found", file=sys.stderr)
        return EXIT_RUN_FAILED
    corr = A.correlation_report(ok, args.mode, args.n_perm)
    out = args.out or Path(args.results_dir) / "plots"
    dataset, init = _sweep_labels(Path(args.results_dir))
    for p in A.emit_plots(ok, corr, out, args.mode, dataset, init):
        print(p)
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_file = ckpt.parent.parent.parent / "config.json"
    try:
        raw = json.loads(cfg_file.read_text())
        bench = BenchmarkSpec(**{k: tuple(v) if k == "per_class" else v for k, v in raw["benchmark"].items()})
        seed = args.seed if args.seed is not None else int(ckpt.parent.name)
        phi = load_extractor(ckpt)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"cannot load checkpoint context: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seq = run_sequence(bench, seed)
    if not 0 <= args.task < len(seq):
        print(f"task must lie in [0, {len(seq) - 1}]", file=sys.stderr)
        return EXIT_CONFIG
    s = args.probe_seed if args.probe_seed is not None else probe_seed(seed, args.task - 1, args.k)
    try:
        acc = M.kshot_probe_fwt(phi, seq[args.task], args.k, s)
    except Exception as exc:
        print(f"probe failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    print(f"{acc:.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "analyze": cmd_analyze, "plots": cmd_plots, "probe": cmd_probe}[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
