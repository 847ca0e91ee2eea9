"""Rank correlation, t-based confidence intervals and plot-ready tables."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .experiment import RunResult

N_PERMUTATIONS = 100_000


class UndefinedCorrelationError(ValueError):
    pass


def _ranks(v: np.ndarray) -> np.ndarray:
    return stats.rankdata(v, method="average")


def _pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    return (a * b).sum(axis=-1) / np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))


def spearman(x: Sequence[float], y: Sequence[float], n_perm: int = N_PERMUTATIONS,
             seed: int = 0) -> tuple[float, float]:
    """Spearman rho (average ranks for ties) and a two-sided permutation p-value.

    ``p = (1 + #{|rho_perm| >= |rho|}) / (1 + n_perm)``, so it is never 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ValueError("spearman needs at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    rx, ry = _ranks(x), _ranks(y)
    rho = float(_pearson_rows(rx, ry))
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 10_000
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perms = rng.permuted(np.broadcast_to(ry, (m, len(ry))), axis=1)
        r = _pearson_rows(np.broadcast_to(rx, perms.shape), perms)
        hits += int(np.sum(np.abs(r) >= abs(rho) - 1e-12))
        done += m
    rho = max(-1.0, min(1.0, rho))
    return rho, (hits + 1) / (n_perm + 1)


@dataclass(frozen=True)
class Summary:
    mean: float
    half_width: float | None  # None when fewer than 2 runs
    n: int


def t_interval(values: Sequence[float], level: float = 0.95) -> Summary:
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=np.float64)
    if len(v) == 0:
        return Summary(math.nan, None, 0)
    if len(v) < 2:
        return Summary(float(v.mean()), None, 1)
    if np.all(v == v[0]):  # exact, free of summation rounding
        return Summary(float(v[0]), 0.0, len(v))
    sem = v.std(ddof=1) / math.sqrt(len(v))
    q = stats.t.ppf(0.5 + level / 2, len(v) - 1)
    return Summary(float(v.mean()), float(q * sem), len(v))


def metric_values(r: RunResult, mode: str = "probe") -> dict[str, float]:
    rep = r.report
    out = {
        "avg_fgt": rep.avg_fgt,
        "avg_acc": rep.avg_acc,
        "avg_lacc": rep.avg_lacc,
    }
    if rep.avg_fdiv is not None:
        out["avg_fdiv"] = rep.avg_fdiv
    for m, d in rep.avg_fwt.items():
        for k, v in d.items():
            out[f"avg_fwt_{m}_k{k}"] = v
    if rep.upstream_acc:
        out["upstream_acc_final"] = rep.upstream_acc[-1]
    return out


def aggregate(results: Iterable[RunResult]) -> dict[str, dict[str, Summary]]:
    """learner -> metric -> mean and 95% t half-width over that learner's seeds."""
    grouped: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in sorted((r for r in results if r.report is not None), key=lambda r: (r.learner, r.seed)):
        for name, v in metric_values(r).items():
            grouped[r.learner][name].append(v)
    return {lrn: {m: t_interval(v) for m, v in ms.items()} for lrn, ms in grouped.items()}


@dataclass(frozen=True)
class CorrelationRow:
    metric: str  # "avg_fwt" | "avg_fdiv"
    k: int | None  # shots for avg_fwt, None for avg_fdiv
    pooling: str  # "runs" (method x seed, primary) | "methods" (seed-averaged per method)
    rho: float
    p: float
    n: int


def correlation_report(results: Sequence[RunResult], mode: str = "probe",
                       n_perm: int = N_PERMUTATIONS) -> list[CorrelationRow]:
    """Spearman of AvgFgt against AvgFwt^k (each k) and AvgFDiv, pooled over runs and over methods."""
    ok = sorted((r for r in results if r.report is not None), key=lambda r: (r.learner, r.seed))
    if not ok:
        return []
    ks = sorted({k for r in ok for k in r.report.avg_fwt.get(mode, {})})
    targets = [("avg_fwt", k, lambda r, k=k: r.report.avg_fwt[mode][k]) for k in ks]
    if all(r.report.avg_fdiv is not None for r in ok):
        targets.append(("avg_fdiv", None, lambda r: r.report.avg_fdiv))
    fgt = [r.report.avg_fgt for r in ok]
    rows = []
    for metric, k, get in targets:
        val = [get(r) for r in ok]
        rows.append(_corr_row(metric, k, "runs", fgt, val, n_perm))
        by: dict[str, list[tuple[float, float]]] = defaultdict(list)
        for r, f, v in zip(ok, fgt, val):
            by[r.learner].append((f, v))
        if len(by) >= 3:
            f_m = [float(np.mean([a for a, _ in by[name]])) for name in sorted(by)]
            v_m = [float(np.mean([b for _, b in by[name]])) for name in sorted(by)]
            rows.append(_corr_row(metric, k, "methods", f_m, v_m, n_perm))
    return rows


def _corr_row(metric, k, pooling, x, y, n_perm) -> CorrelationRow:
    try:
        rho, p = spearman(x, y, n_perm)
    except UndefinedCorrelationError:
        rho, p = math.nan, math.nan
    return CorrelationRow(metric, k, pooling, rho, p, len(x))


# ---------------------------------------------------------------------------
# plot tables
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else v


def emit_plots(results: Sequence[RunResult], correlation: Sequence[CorrelationRow], out_dir,
               mode: str = "probe", dataset: str = "", init: str = "") -> list[Path]:
    """Write the forgetting bars, grouped transfer bars, upstream series and correlation table as CSV.

    Correlation rows are keyed by (dataset, init, metric, k) so tables from
    several sweeps can be concatenated.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = aggregate(results)
    learners = list(dict.fromkeys(r.learner for r in results if r.report is not None))
    written = []

    p = out / "fgt_bars.csv"
    rows = []
    for lrn in learners:
        s = agg[lrn]["avg_fgt"]
        rows.append([lrn, _fmt(s.mean), _fmt(s.half_width), s.n])
    _write_csv(p, ["method", "avg_fgt_fraction", "ci95_halfwidth_fraction", "n_runs"], rows)
    written.append(p)

    ks = sorted({k for r in results if r.report for k in r.report.avg_fwt.get(mode, {})})
    p = out / "fwt_grouped.csv"
    header = ["method"] + [f"avg_fwt_k{k}_fraction" for k in ks] + [f"ci95_k{k}_fraction" for k in ks]
    rows = []
    for lrn in learners:
        means = [_fmt(agg[lrn][f"avg_fwt_{mode}_k{k}"].mean) for k in ks]
        hws = [_fmt(agg[lrn][f"avg_fwt_{mode}_k{k}"].half_width) for k in ks]
        rows.append([lrn] + means + hws)
    _write_csv(p, header, rows)
    written.append(p)

    series: dict[str, list[list[float]]] = defaultdict(list)
    for r in results:
        if r.report and r.report.upstream_acc:
            series[r.learner].append(r.report.upstream_acc)
    if series:
        p = out / "upstream_series.csv"
        rows = []
        for lrn, runs in series.items():
            arr = np.array(runs)
            for b in range(arr.shape[1]):
                s = t_interval(arr[:, b])
                rows.append([lrn, b, _fmt(s.mean), _fmt(s.half_width)])
        _write_csv(p, ["method", "tasks_seen", "upstream_acc_fraction", "ci95_halfwidth_fraction"], rows)
        written.append(p)

    p = out / "correlation.csv"
    _write_csv(p, ["dataset", "init", "metric", "k", "pooling", "spearman_rho", "p_value", "n"],
               [[dataset, init, c.metric, "" if c.k is None else c.k, c.pooling, _fmt(c.rho), _fmt(c.p), c.n]
                for c in correlation])
    written.append(p)
    return written


def format_table(agg: dict[str, dict[str, Summary]], metrics: Sequence[str]) -> str:
    """Method x metric text table, ``mean +- half-width`` in percent."""
    lines = ["method".ljust(10) + "".join(m.rjust(22) for m in metrics)]
    for lrn, ms in agg.items():
        cells = []
        for m in metrics:
            s = ms.get(m)
            if s is None:
                cells.append("-".rjust(22))
            elif s.half_width is None:
                cells.append(f"{100 * s.mean:.2f}".rjust(22))
            else:
                cells.append(f"{100 * s.mean:.2f} +- {100 * s.half_width:.2f}".rjust(22))
        lines.append(lrn.ljust(10) + "".join(cells))
    return "\n".join(lines)
