"""Experiment configuration, single runs and resumable method x seed sweeps."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import metrics as M
from .learners import FomamlConfig, LearnerConfig, TrainingError, TrainTrace, run_continual, select_hyperparameter, train_erm
from .nn import ContinualModel, Linear, SGDConfig, init_model, save_extractor, write_atomic
from .tasks import TaskDataset, TaskSequence, gen_drifting_benchmark, gen_split_benchmark, gen_upstream_task

log = logging.getLogger(__name__)

OUTPUT_ENV = "FORGETLAB_OUTPUT"
UPSTREAM_HEAD_ID = -1
# Base rate picked from {0.1, 0.01, 0.001} by validation AvgLAcc on the default benchmark.
DEFAULT_SGD = SGDConfig(lr=0.1, epochs=50, batch_size=32)
LPFT_LR = 0.001  # LP-FT stage-2 base rate unless a learner sets its own


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkSpec:
    kind: str = "split"  # split | drifting
    n_tasks: int = 5
    classes_per_task: int = 2  # split only
    n_classes: int = 4  # drifting only
    drift_step: float = 0.2
    input_dim: int = 16
    per_class: tuple[int, int, int] = (200, 50, 100)
    sigma: float = 1.0
    seed: int = 0
    randomize_order: bool = True
    signal_dim: int | None = None  # split only

    def build(self) -> TaskSequence:
        if self.kind == "split":
            return gen_split_benchmark(self.n_tasks, self.classes_per_task, self.input_dim,
                                       self.per_class, self.seed, self.sigma, self.signal_dim)
        if self.kind == "drifting":
            return gen_drifting_benchmark(self.n_tasks, self.n_classes, self.drift_step, self.input_dim,
                                          self.per_class, self.seed, self.sigma)
        raise ConfigError(f"unknown benchmark kind {self.kind!r}")


@dataclass
class UpstreamSpec:
    n_classes: int = 10
    per_class: tuple[int, int, int] = (200, 50, 100)
    sigma: float = 1.0
    seed: int = 12345
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32

    def build(self, input_dim: int) -> TaskDataset:
        return gen_upstream_task(self.n_classes, input_dim, self.per_class, self.seed, self.sigma)


@dataclass
class LearnerSpec:
    """One learner entry. A list-valued ``lam`` is a grid for validation selection."""

    name: str
    config: LearnerConfig
    lam_grid: tuple[float, ...] | None = None


@dataclass
class EvalSpec:
    k: tuple[int, ...] = (5, 10, 20)
    probe: bool = True
    finetune: bool = False
    fdiv: bool = True
    upstream: bool = False
    fdiv_alpha: str = "per_class"
    finetune_lr_grid: tuple[float, ...] = (0.01, 0.001)
    finetune_epoch_grid: tuple[int, ...] = (10, 50, 100)


@dataclass
class ExperimentConfig:
    name: str
    benchmark: BenchmarkSpec
    learners: list[LearnerSpec]
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    widths: tuple[int, ...] = (16, 64, 32)
    head_mode: str = "multi"
    init: str = "random"
    upstream: UpstreamSpec = field(default_factory=UpstreamSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if not self.learners:
            raise ConfigError("at least one learner is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {self.seeds}")
        if any(k < 1 for k in self.eval.k):
            raise ConfigError("k values must be >= 1")
        if self.init not in ("random", "pretrained"):
            raise ConfigError(f"init must be 'random' or 'pretrained', got {self.init!r}")
        names = [s.name for s in self.learners]
        if len(set(names)) != len(names):
            raise ConfigError(f"learner names must be unique: {names}")
        if self.widths[0] != self.benchmark.input_dim:
            raise ConfigError(f"first width {self.widths[0]} != input_dim {self.benchmark.input_dim}")

    def learner(self, name: str) -> LearnerSpec:
        for s in self.learners:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_SGD_KEYS = {"lr", "epochs", "batch_size", "schedule"}


def _sgd(d: dict, base: SGDConfig) -> SGDConfig:
    extra = set(d) - _SGD_KEYS
    if extra:
        raise ConfigError(f"unknown sgd keys {sorted(extra)}")
    return SGDConfig(**{**asdict(base), **d})


def parse_config(raw: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a plain mapping (e.g. loaded YAML)."""
    raw = copy.deepcopy(raw)
    try:
        bench = BenchmarkSpec(**{k: tuple(v) if k == "per_class" else v for k, v in raw.pop("benchmark", {}).items()})
        model = raw.pop("model", {})
        init = raw.pop("init", {"kind": "random"})
        if isinstance(init, str):
            init = {"kind": init}
        up = init.get("upstream", {})
        upstream = UpstreamSpec(**{k: tuple(v) if k == "per_class" else v for k, v in up.items()})
        base_sgd = _sgd(raw.pop("sgd", {}), DEFAULT_SGD)
        ev = raw.pop("eval", {})
        ev = EvalSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()})
        learners = []
        for entry in raw.pop("learners"):
            entry = dict(entry)
            name = entry.pop("name", entry.get("kind"))
            kind = entry.pop("kind")
            own = entry.pop("sgd", {})
            if kind == "LPFT" and "lr" not in own:
                own = {**own, "lr": LPFT_LR}
            sgd = _sgd(own, base_sgd)
            fom = FomamlConfig(**entry.pop("fomaml", {}))
            lam = entry.pop("lam", 1.0)
            grid = None
            if isinstance(lam, list):
                grid = tuple(float(v) for v in lam)
                lam = grid[0]
            cfg = LearnerConfig(kind=kind, sgd=sgd, lam=float(lam), fomaml=fom, **entry)
            learners.append(LearnerSpec(name, cfg, grid))
        cfg = ExperimentConfig(
            name=raw.pop("name", "sweep"),
            benchmark=bench,
            learners=learners,
            seeds=tuple(raw.pop("seeds", (0, 1, 2, 3, 4))),
            widths=tuple(model.get("widths", (bench.input_dim, 64, 32))),
            head_mode=model.get("head_mode", "multi" if bench.kind == "split" else "single"),
            init=init.get("kind", "random"),
            upstream=upstream,
            eval=ev,
            output_dir=raw.pop("output_dir", os.environ.get(OUTPUT_ENV, "results")),
            workers=int(raw.pop("workers", 1)),
        )
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if raw:
        raise ConfigError(f"unknown top-level keys {sorted(raw)}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return parse_config(raw)


def config_hash(cfg: ExperimentConfig, learner: str, seed: int) -> str:
    """Hash of everything that determines one run's outputs."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("workers")
    d.pop("seeds")
    d["learners"] = [l for l in d["learners"] if l["name"] == learner]
    d["seed"] = seed
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


def task_order(n: int, seed: int, randomize: bool) -> list[int]:
    if not randomize:
        return list(range(n))
    return [int(v) for v in np.random.default_rng([seed, 99]).permutation(n)]


def run_sequence(bench: BenchmarkSpec, seed: int) -> TaskSequence:
    """The benchmark as seen by one run: built once, then reordered by the run seed."""
    base = bench.build()
    return base.reordered(task_order(len(base), seed, bench.randomize_order))


def probe_seed(seed: int, j: int, k: int) -> int:
    """k-shot draw seed for probing the snapshot after task ``j`` on task ``j + 1``."""
    return int(np.random.default_rng([seed, j, k]).integers(2**31))


def pretrain(widths, seed: int, upstream: TaskDataset, spec: UpstreamSpec) -> tuple[ContinualModel, Linear]:
    """ERM on the upstream task; returns the model and the upstream head."""
    model = init_model(widths, seed)
    sgd = SGDConfig(lr=spec.lr, epochs=spec.epochs, batch_size=spec.batch_size)
    train_erm(model, upstream, sgd, np.random.default_rng([seed, 7]))
    head = model.heads.heads.pop(UPSTREAM_HEAD_ID)
    return model, head


def initial_model(cfg: ExperimentConfig, seq: TaskSequence, seed: int):
    """Returns ``(f_0, upstream_task, upstream_head)``; the last two are None for random init."""
    total = seq.total_classes if cfg.head_mode == "single" else None
    if cfg.init == "random":
        return init_model(cfg.widths, seed, cfg.head_mode, total), None, None
    upstream = cfg.upstream.build(cfg.benchmark.input_dim)
    pre, head = pretrain(cfg.widths, seed, upstream, cfg.upstream)
    model = init_model(cfg.widths, seed, cfg.head_mode, total)
    model.extractor = pre.extractor
    return model, upstream, head


@dataclass
class RunOutput:
    report: M.MetricsReport
    trace: TrainTrace
    seq: TaskSequence
    probe_isolation_ok: bool = True


def evaluate_run(trace: TrainTrace, seq: TaskSequence, cfg: ExperimentConfig, seed: int,
                 upstream: TaskDataset | None = None, upstream_head: Linear | None = None,
                 f0: ContinualModel | None = None) -> tuple[M.MetricsReport, bool]:
    """All boundary evaluations on immutable snapshots. Also reports whether probing left Phi_j intact."""
    acc = M.fill_accuracy_matrix(trace, seq)
    val = M.fill_accuracy_matrix(trace, seq, "val")
    n = len(seq)
    report = M.MetricsReport(
        acc_matrix=acc.rows(),
        avg_fgt=M.avg_forgetting(acc) if n > 1 else float("nan"),
        avg_acc=M.avg_accuracy(acc),
        avg_lacc=M.avg_learning_accuracy(acc),
        val_avg_lacc=M.avg_learning_accuracy(val),
    )
    isolated = True
    ev = cfg.eval
    modes = [m for m, on in (("probe", ev.probe), ("finetune", ev.finetune)) if on]
    for mode in modes:
        per_k: dict[int, list[float]] = {k: [] for k in ev.k}
        for j in range(n - 1):
            phi = trace.phi(j)
            before = phi.to_bytes()
            for k in ev.k:
                s = probe_seed(seed, j, k)
                if mode == "probe":
                    v = M.kshot_probe_fwt(phi, seq[j + 1], k, s)
                else:
                    v = M.kshot_finetune_fwt(phi, seq[j + 1], k, s, ev.finetune_lr_grid, ev.finetune_epoch_grid)
                per_k[k].append(v)
            isolated &= phi.to_bytes() == before
        report.fwt[mode] = per_k
        report.avg_fwt[mode] = M.avg_fwt(per_k) if n > 1 else {}
    if ev.fdiv and n > 1:
        report.fdiv = [M.boundary_feature_diversity(trace.phi(j), seq[j + 1], class_alpha=ev.fdiv_alpha)
                       for j in range(n - 1)]
        report.avg_fdiv = M.avg_feature_diversity(report.fdiv)
    if ev.upstream and upstream is not None:
        series = [M.upstream_accuracy(f0.extractor, upstream, upstream_head)]
        series += [M.upstream_accuracy(trace.phi(j), upstream, upstream_head) for j in range(n)]
        report.upstream_acc = series
    return report, isolated


def run_one(cfg: ExperimentConfig, learner: LearnerConfig, seed: int) -> RunOutput:
    seq = run_sequence(cfg.benchmark, seed)
    f0, upstream, head = initial_model(cfg, seq, seed)
    trace = run_continual(seq, learner, seed, f0, pretrained=cfg.init == "pretrained")
    report, isolated = evaluate_run(trace, seq, cfg, seed, upstream, head, f0)
    return RunOutput(report, trace, seq, isolated)


def validation_score(cfg: ExperimentConfig, learner: LearnerConfig, seed: int) -> float:
    """Validation average learning accuracy of one continual pass (no transfer evaluation).

    A candidate whose training diverges scores -inf so it can never be selected.
    """
    seq = run_sequence(cfg.benchmark, seed)
    f0, _, _ = initial_model(cfg, seq, seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            trace = run_continual(seq, learner, seed, f0, pretrained=cfg.init == "pretrained")
    except TrainingError as exc:
        log.warning("candidate %s diverged during selection: %s", learner, exc)
        return float("-inf")
    return M.avg_learning_accuracy(M.fill_accuracy_matrix(trace, seq, "val"))


def resolve_learner(cfg: ExperimentConfig, spec: LearnerSpec) -> LearnerConfig:
    """Pick lambda from its grid (if any) on validation AvgLAcc using the first seed."""
    if not spec.lam_grid:
        return spec.config
    seed = cfg.seeds[0]
    lam = select_hyperparameter(
        spec.lam_grid, lambda v: validation_score(cfg, spec.config.with_(lam=v), seed)
    )
    log.info("%s: selected lambda=%s from %s", spec.name, lam, spec.lam_grid)
    return spec.config.with_(lam=lam)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    learner: str
    seed: int
    task_order: list[int]
    config_hash: str
    report: M.MetricsReport | None
    seconds: float
    lam: float | None = None
    error: str | None = None
    probe_isolated: bool = True

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "report"}
        d["report"] = self.report.to_dict() if self.report else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        rep = d.pop("report")
        return cls(report=M.MetricsReport.from_dict(rep) if rep else None, **d)


def sweep_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / cfg.name


def run_dir(cfg: ExperimentConfig, learner: str, seed: int) -> Path:
    return sweep_dir(cfg) / learner / str(seed)


def _write_json(path: Path, obj) -> None:
    write_atomic(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _existing(path: Path, h: str) -> RunResult | None:
    f = path / "report.json"
    if not f.exists():
        return None
    try:
        res = RunResult.from_dict(json.loads(f.read_text()))
    except (ValueError, KeyError, TypeError):
        return None
    return res if res.config_hash == h and res.error is None else None


def _execute(args) -> dict:
    cfg, name, learner, seed = args
    h = config_hash(cfg, name, seed)
    out = run_dir(cfg, name, seed)
    order = task_order(cfg.benchmark.n_tasks, seed, cfg.benchmark.randomize_order)
    t0 = time.perf_counter()
    lam = learner.lam if learner.kind in ("MT", "EWC", "L2REG") else None
    try:
        run = run_one(cfg, learner, seed)
        for j, snap in enumerate(run.trace.snapshots):
            save_extractor(snap.extractor, out / f"phi_after_task_{j}")
        res = RunResult(f"{name}/{seed}", name, seed, order, h, run.report, time.perf_counter() - t0, lam,
                        probe_isolated=run.probe_isolation_ok)
        if not run.probe_isolation_ok:
            res.error = "probing mutated a feature-extractor checkpoint"
    except Exception as exc:  # recorded, sweep continues
        res = RunResult(f"{name}/{seed}", name, seed, order, h, None, time.perf_counter() - t0, lam,
                        error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
    _write_json(out / "report.json", res.to_dict())
    return res.to_dict()


def run_sweep(cfg: ExperimentConfig, resume: bool = True) -> list[RunResult]:
    """Run every (learner, seed) pair, skipping runs whose stored config hash matches."""
    root = sweep_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", cfg.to_dict())
    jobs, done = [], {}
    for spec in cfg.learners:
        pending = [s for s in cfg.seeds if not (resume and _existing(run_dir(cfg, spec.name, s),
                                                                       config_hash(cfg, spec.name, s)))]
        for s in cfg.seeds:
            if s not in pending:
                done[(spec.name, s)] = _existing(run_dir(cfg, spec.name, s), config_hash(cfg, spec.name, s))
        if not pending:
            continue
        learner = resolve_learner(cfg, spec)
        jobs += [(cfg, spec.name, learner, s) for s in pending]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(_execute, jobs))
    else:
        outs = [_execute(j) for j in jobs]
    for o in outs:
        r = RunResult.from_dict(o)
        done[(r.learner, r.seed)] = r
    return [done[(spec.name, s)] for spec in cfg.learners for s in cfg.seeds]


def load_results(root) -> list[RunResult]:
    out = []
    for f in sorted(Path(root).glob("*/*/report.json")):
        out.append(RunResult.from_dict(json.loads(f.read_text())))
    return out
