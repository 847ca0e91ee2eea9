"""Continual learners: IND, FT, LP-FT, MT, ER, AGEM, FOMAML, EWC and L2.

Every learner trains one task at a time on a :class:`ContinualModel` and
records a full model snapshot after each task in a :class:`TrainTrace`.
Randomness is split into independent streams per (seed, task, purpose) so
that, e.g., MT with lambda=0 follows exactly the FT trajectory.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import ContinualModel, SGDConfig, cosine_lr, sgd_step
from .tasks import ReplayBuffer, Split, TaskDataset, TaskSequence, minibatches, update_replay_buffer

log = logging.getLogger(__name__)

KINDS = ("IND", "FT", "LPFT", "MT", "ER", "AGEM", "FOMAML", "EWC", "L2REG")

# stream tags for np.random.default_rng([seed, task, tag])
_BATCHES, _AUX, _BUFFER, _FISHER, _META = range(5)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FomamlConfig:
    alpha: float | None = None  # None: tied to the (scheduled) outer rate
    b: int = 2
    c: int = 1
    resample_each_step: bool = True

    def __post_init__(self):
        if self.b < 1:
            raise ValueError(f"FOMAML needs b >= 1, got {self.b}")
        if self.c < 0:
            raise ValueError(f"FOMAML needs c >= 0, got {self.c}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "FT"
    sgd: SGDConfig = SGDConfig()
    lam: float = 1.0
    m: int = 10
    fomaml: FomamlConfig = FomamlConfig()
    lp_epochs: int = 10
    lp_lr: float = 0.01  # stage-1 head probe; stage 2 uses sgd.lr
    mt_reduce: str = "mean"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("MT", "EWC", "L2REG") and self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.kind in ("ER", "AGEM") and self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.lp_epochs < 0:
            raise ValueError("lp_epochs must be >= 0")
        if self.lp_lr <= 0:
            raise ValueError("lp_lr must be > 0")
        if self.mt_reduce not in ("mean", "sum"):
            raise ValueError(f"mt_reduce must be 'mean' or 'sum', got {self.mt_reduce!r}")

    def with_(self, **kw) -> "LearnerConfig":
        return replace(self, **kw)


@dataclass
class FisherState:
    """Per completed task: diagonal Fisher and anchor parameters, keyed by param name."""

    fisher: list[dict[str, np.ndarray]] = field(default_factory=list)
    anchors: list[dict[str, np.ndarray]] = field(default_factory=list)


@dataclass
class TrainTrace:
    """Model snapshot after every task plus per-task loss samples."""

    snapshots: list[ContinualModel] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)
    agem_min_dot: float = math.inf

    def phi(self, j: int):
        return self.snapshots[j].extractor


def _rng(seed: int, task: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, task, tag])


def targets_for(model: ContinualModel, task: TaskDataset, y: np.ndarray) -> np.ndarray:
    return task.global_labels(y) if model.heads.mode == "single" else y


def batch_loss(model: ContinualModel, task: TaskDataset, x: np.ndarray, y: np.ndarray) -> Tensor:
    return ag.cross_entropy(model(Tensor(x), task.task_id), targets_for(model, task, y))


def _sample_batch(split: Split, size: int, rng: np.random.Generator) -> Split:
    n = len(split)
    idx = rng.choice(n, size=min(size, n), replace=False)
    return split.take(idx)


def _check_finite(loss: Tensor, step: int, task_id: int) -> None:
    if not np.isfinite(loss.data):
        raise TrainingError(f"loss diverged ({loss.item()}) at step {step} of task {task_id}")


# ---------------------------------------------------------------------------
# ERM core loop
# ---------------------------------------------------------------------------


def train_erm(
    model: ContinualModel,
    task: TaskDataset,
    sgd: SGDConfig,
    rng: np.random.Generator,
    aux_loss: Callable[[ContinualModel, int], Tensor | None] | None = None,
    params: Sequence[Tensor] | None = None,
    losses: list[float] | None = None,
) -> ContinualModel:
    """Mean cross-entropy over shuffled minibatches with the per-task cosine schedule.

    ``aux_loss(model, step)`` may add a term (replay, multitask, penalty) to
    each step's loss.
    """
    n_train = len(task.train)
    if n_train == 0:
        raise TrainingError(f"task {task.task_id} has no training data")
    model.heads.start_task(task.task_id, task.n_classes)
    if params is None:
        params = model.parameters([task.task_id])
    n = sgd.steps(n_train)
    step = 0
    for _ in range(sgd.epochs):
        for idx in minibatches(n_train, sgd.batch_size, rng):
            loss = batch_loss(model, task, task.train.x[idx], task.train.y[idx])
            if aux_loss is not None:
                extra = aux_loss(model, step)
                if extra is not None:
                    loss = ag.add(loss, extra)
            _check_finite(loss, step, task.task_id)
            ag.backward(loss)
            _fill_missing_grads(params)
            sgd_step(params, sgd.rate(step, n))
            if losses is not None:
                losses.append(loss.item())
            step += 1
    return model


def _fill_missing_grads(params: Iterable[Tensor]) -> None:
    # heads that took no part in this step's loss get a zero gradient
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train_head_on_features(
    head,
    feats: np.ndarray,
    targets: np.ndarray,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    schedule: str = "constant",
) -> None:
    """SGD on a linear head over fixed, precomputed features."""
    n = len(targets)
    steps = epochs * math.ceil(n / batch_size)
    params = head.parameters()
    step = 0
    for _ in range(epochs):
        for idx in minibatches(n, batch_size, rng):
            loss = ag.cross_entropy(head(Tensor(feats[idx])), targets[idx])
            ag.backward(loss)
            rate = lr if schedule == "constant" else cosine_lr(lr, step, steps)
            sgd_step(params, rate)
            step += 1


def train_lpft(
    model: ContinualModel,
    task: TaskDataset,
    sgd: SGDConfig,
    lp_epochs: int,
    rng: np.random.Generator,
    losses: list[float] | None = None,
    lp_lr: float = 0.01,
) -> ContinualModel:
    """Linear probe of the new head on frozen Phi (constant ``lp_lr``), then joint ERM."""
    model.heads.start_task(task.task_id, task.n_classes)
    if lp_epochs > 0:
        feats = model.extractor.features(task.train.x)
        head = model.heads.head(task.task_id)
        train_head_on_features(
            head, feats, targets_for(model, task, task.train.y),
            lp_lr, lp_epochs, sgd.batch_size, rng, "constant",
        )
    return train_erm(model, task, sgd, rng, losses=losses)


# ---------------------------------------------------------------------------
# rehearsal-style auxiliary losses (MT, ER)
# ---------------------------------------------------------------------------


def _rehearsal_loss(
    sources: dict[int, tuple[TaskDataset, Split]],
    coef: float,
    batch_size: int,
    rng: np.random.Generator,
    reduce: str = "mean",
):
    """Average (or sum) over previous tasks of a sampled-batch loss through each task's head."""
    ids = sorted(sources)

    def aux(model: ContinualModel, step: int) -> Tensor | None:
        if not ids or coef == 0.0:
            return None
        total = None
        for j in ids:
            task, split = sources[j]
            b = _sample_batch(split, batch_size, rng)
            term = batch_loss(model, task, b.x, b.y)
            total = term if total is None else ag.add(total, term)
        w = coef / len(ids) if reduce == "mean" else coef
        return ag.scale(total, w)

    return aux


def train_mt(model, task, previous: Sequence[TaskDataset], lam: float, sgd, rng, aux_rng,
             reduce: str = "mean", losses=None) -> ContinualModel:
    sources = {t.task_id: (t, t.train) for t in previous}
    ids = [t.task_id for t in previous] + [task.task_id]
    model.heads.start_task(task.task_id, task.n_classes)
    aux = _rehearsal_loss(sources, lam, sgd.batch_size, aux_rng, reduce)
    return train_erm(model, task, sgd, rng, aux, model.parameters(ids), losses)


def train_er(model, task, previous: Sequence[TaskDataset], buffer: ReplayBuffer, sgd, rng, aux_rng,
             losses=None) -> ContinualModel:
    by_id = {t.task_id: t for t in previous}
    sources = {j: (by_id[j], buffer.stores[j]) for j in buffer.task_ids if j in by_id}
    ids = sorted(sources) + [task.task_id]
    model.heads.start_task(task.task_id, task.n_classes)
    aux = _rehearsal_loss(sources, 1.0, sgd.batch_size, aux_rng)
    return train_erm(model, task, sgd, rng, aux, model.parameters(ids), losses)


# ---------------------------------------------------------------------------
# AGEM
# ---------------------------------------------------------------------------


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` so that it no longer opposes ``g_ref``.

    Returns ``g`` unchanged when ``g @ g_ref >= 0``; otherwise
    ``g - (g @ g_ref) / (g_ref @ g_ref) * g_ref``.
    """
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ag.ShapeError(f"agem_project: shapes {g.shape} and {g_ref.shape} differ")
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    ref_sq = float(g_ref @ g_ref)
    if ref_sq < 1e-18:
        log.warning("agem_project: reference gradient is ~0, skipping projection")
        return g
    out = g - (dot / ref_sq) * g_ref
    # a second pass removes rounding residue along g_ref
    resid = float(out @ g_ref)
    if resid < 0:
        out = out - (resid / ref_sq) * g_ref
    return out


def _flat_grad(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in params]
    )


def _unflatten_into_grads(params: Sequence[Tensor], flat: np.ndarray) -> None:
    off = 0
    for p in params:
        p.grad = flat[off:off + p.size].reshape(p.shape).copy()
        off += p.size


def train_agem(model, task, previous: Sequence[TaskDataset], memory: ReplayBuffer, sgd, rng, aux_rng,
               trace: TrainTrace | None = None, losses=None) -> ContinualModel:
    """SGD on the current task with each gradient projected against a memory gradient.

    Gradients are flattened over the model's canonical parameter order
    (Phi layers, then heads by task id).
    """
    model.heads.start_task(task.task_id, task.n_classes)
    by_id = {t.task_id: t for t in previous}
    mem_ids = [j for j in memory.task_ids if j in by_id]
    params = model.parameters(mem_ids + [task.task_id])
    n_train = len(task.train)
    n = sgd.steps(n_train)
    step = 0
    for _ in range(sgd.epochs):
        for idx in minibatches(n_train, sgd.batch_size, rng):
            loss = batch_loss(model, task, task.train.x[idx], task.train.y[idx])
            _check_finite(loss, step, task.task_id)
            ag.backward(loss)
            if mem_ids:
                g = _flat_grad(params)
                for p in params:
                    p.grad = None
                ref = _memory_batch_loss(model, by_id, memory, mem_ids, sgd.batch_size, aux_rng)
                ag.backward(ref)
                g_ref = _flat_grad(params)
                g_tilde = agem_project(g, g_ref)
                dot = float(g_tilde @ g_ref)
                if dot < -1e-9:
                    raise TrainingError(f"AGEM projection postcondition violated: {dot}")
                if trace is not None:
                    trace.agem_min_dot = min(trace.agem_min_dot, dot)
                _unflatten_into_grads(params, g_tilde)
            else:
                _fill_missing_grads(params)
            sgd_step(params, sgd.rate(step, n))
            if losses is not None:
                losses.append(loss.item())
            step += 1
    return model


def _memory_batch_loss(model, by_id, memory: ReplayBuffer, ids, size, rng) -> Tensor:
    x, y, t = memory.union()
    pick = rng.choice(len(y), size=min(size, len(y)), replace=False)
    pick.sort()
    total = None
    for j in ids:
        sel = pick[t[pick] == j]
        if len(sel) == 0:
            continue
        term = ag.scale(batch_loss(model, by_id[j], x[sel], y[sel]), len(sel) / len(pick))
        total = term if total is None else ag.add(total, term)
    return total


# ---------------------------------------------------------------------------
# FOMAML
# ---------------------------------------------------------------------------


def _grads_by_name(model) -> dict[str, np.ndarray]:
    return {n: p.grad for n, p in model.named_parameters() if p.grad is not None}


def _zero(model) -> None:
    for _, p in model.named_parameters():
        p.grad = None


def fomaml_step(
    model,
    current: int,
    previous: Sequence[int],
    loss_fn: Callable[[object, int], Tensor],
    alpha: float,
    beta: float,
    b: int,
    c: int,
    rng: np.random.Generator,
    G: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """One outer iteration of first-order MAML; updates ``model`` in place.

    ``loss_fn(m, j)`` draws a fresh batch of task ``j`` and returns its loss on
    model ``m``. ``G`` is the gradient the outer sum starts from; when None it
    is computed on a fresh current-task batch. Adapted-model gradients come
    from a cloned model's own graph, so no second derivatives enter ``G``.
    Returns the accumulated gradient that was applied.
    """
    if b < 1:
        raise ValueError("FOMAML needs b >= 1")
    if G is None:
        _zero(model)
        ag.backward(loss_fn(model, current))
        G = _grads_by_name(model)
        _zero(model)
    G = {k: v.copy() for k, v in G.items()}
    c = min(c, len(previous))
    chosen = list(rng.choice(list(previous), size=c, replace=False)) if c > 0 else []
    for j in [int(v) for v in chosen] + [current]:
        adapted = model.clone()
        _zero(adapted)
        for _ in range(b):
            ag.backward(loss_fn(adapted, j))
            for _, p in adapted.named_parameters():
                if p.grad is not None:
                    p.data -= alpha * p.grad
                    p.grad = None
        ag.backward(loss_fn(adapted, j))
        for name, g in _grads_by_name(adapted).items():
            G[name] = G[name] + g if name in G else g.copy()
    params = dict(model.named_parameters())
    for name, g in G.items():
        params[name].data -= beta * g
    return G


def train_fomaml(model, task, previous: Sequence[TaskDataset], cfg: FomamlConfig, sgd, rng, meta_rng,
                 losses=None) -> ContinualModel:
    """Continual FOMAML: ``n = sgd.steps(|train|)`` outer iterations, beta on the cosine schedule."""
    model.heads.start_task(task.task_id, task.n_classes)
    by_id = {t.task_id: t for t in previous}
    by_id[task.task_id] = task

    def loss_fn(m, j):
        t = by_id[j]
        bt = _sample_batch(t.train, sgd.batch_size, rng)
        return batch_loss(m, t, bt.x, bt.y)

    n = sgd.steps(len(task.train))
    fixed_G = None
    if not cfg.resample_each_step:
        _zero(model)
        ag.backward(loss_fn(model, task.task_id))
        fixed_G = _grads_by_name(model)
        _zero(model)
    prev_ids = [t.task_id for t in previous]
    for p in range(n):
        beta = sgd.rate(p, n)
        alpha = beta if cfg.alpha is None else cfg.alpha
        G = fomaml_step(model, task.task_id, prev_ids, loss_fn, alpha, beta, cfg.b, cfg.c, meta_rng, fixed_G)
        if losses is not None and p % 10 == 0:
            with ag.no_grad():
                losses.append(loss_fn(model, task.task_id).item())
        if any(not np.all(np.isfinite(g)) for g in G.values()):
            raise TrainingError(f"FOMAML gradient diverged at step {p} of task {task.task_id}")
    return model


# ---------------------------------------------------------------------------
# EWC / L2
# ---------------------------------------------------------------------------


def _penalty_loss(state: FisherState, lam: float, identity: bool):
    """``(lam/2) * sum_tasks sum_p F_p (theta_p - anchor_p)^2`` over anchored Phi params."""

    def aux(model: ContinualModel, step: int) -> Tensor | None:
        if lam == 0.0 or not state.anchors:
            return None
        params = dict(model.extractor.named_parameters())
        total = None
        for k, anchor in enumerate(state.anchors):
            for name, theta_star in anchor.items():
                diff = ag.sub(params[name], Tensor(theta_star))
                sq = ag.mul(diff, diff)
                if not identity:
                    sq = ag.mul(sq, Tensor(state.fisher[k][name]))
                term = ag.sum(sq)
                total = term if total is None else ag.add(total, term)
        return ag.scale(total, lam / 2.0)

    return aux


def penalty_value(model: ContinualModel, state: FisherState, lam: float, identity: bool = False) -> float:
    with ag.no_grad():
        out = _penalty_loss(state, lam, identity)(model, 0)
    return 0.0 if out is None else out.item()


def estimate_fisher(model: ContinualModel, task: TaskDataset, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Diagonal Fisher of Phi: mean over train examples of squared grad of log p(y_hat|x), y_hat ~ model."""
    named = model.extractor.named_parameters()
    acc = {n: np.zeros_like(p.data) for n, p in named}
    x_all = task.train.x
    probs = _softmax(model.logits(x_all, task.task_id))
    for i in range(len(x_all)):
        y_hat = int(rng.choice(probs.shape[1], p=probs[i]))
        logits = model(Tensor(x_all[i:i + 1]), task.task_id)
        ag.backward(ag.cross_entropy(logits, [y_hat]))
        for n, p in named:
            acc[n] += p.grad * p.grad
            p.grad = None
        for p in model.heads.parameters():
            p.grad = None
    return {n: a / len(x_all) for n, a in acc.items()}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def snapshot_anchor(model: ContinualModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.extractor.named_parameters()}


def train_ewc(model, task, state: FisherState, lam: float, sgd, rng, fisher_rng, identity=False,
              losses=None) -> tuple[ContinualModel, FisherState]:
    """ERM plus a quadratic anchor penalty; afterwards records Fisher and anchor for this task."""
    train_erm(model, task, sgd, rng, _penalty_loss(state, lam, identity), losses=losses)
    if identity:
        state.fisher.append({n: np.ones_like(p.data) for n, p in model.extractor.named_parameters()})
    else:
        state.fisher.append(estimate_fisher(model, task, fisher_rng))
    state.anchors.append(snapshot_anchor(model))
    return model, state


def train_l2reg(model, task, state: FisherState, lam: float, sgd, rng, losses=None):
    return train_ewc(model, task, state, lam, sgd, rng, None, identity=True, losses=losses)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def run_continual(
    seq: TaskSequence,
    cfg: LearnerConfig,
    seed: int,
    initial: ContinualModel,
    pretrained: bool = False,
) -> TrainTrace:
    """Train ``cfg.kind`` over the whole sequence starting from (a copy of) ``initial``."""
    if cfg.kind == "LPFT" and not pretrained:
        warnings.warn("LP-FT is intended for a pretrained initial model", stacklevel=2)
    model = initial.clone()
    trace = TrainTrace()
    buffer = ReplayBuffer(cfg.m)
    fisher = FisherState()
    for i, task in enumerate(seq):
        rng = _rng(seed, i, _BATCHES)
        aux_rng = _rng(seed, i, _AUX)
        losses: list[float] = []
        previous = list(seq.tasks[:i])
        kind = cfg.kind
        if kind == "IND":
            model.extractor = initial.extractor.clone()
            train_erm(model, task, cfg.sgd, rng, losses=losses)
        elif kind == "FT":
            train_erm(model, task, cfg.sgd, rng, losses=losses)
        elif kind == "LPFT":
            train_lpft(model, task, cfg.sgd, cfg.lp_epochs, rng, losses=losses, lp_lr=cfg.lp_lr)
        elif kind == "MT":
            train_mt(model, task, previous, cfg.lam, cfg.sgd, rng, aux_rng, cfg.mt_reduce, losses)
        elif kind == "ER":
            train_er(model, task, previous, buffer, cfg.sgd, rng, aux_rng, losses)
            update_replay_buffer(buffer, task, cfg.m, int(_rng(seed, i, _BUFFER).integers(2**31)))
        elif kind == "AGEM":
            train_agem(model, task, previous, buffer, cfg.sgd, rng, aux_rng, trace, losses)
            update_replay_buffer(buffer, task, cfg.m, int(_rng(seed, i, _BUFFER).integers(2**31)))
        elif kind == "FOMAML":
            train_fomaml(model, task, previous, cfg.fomaml, cfg.sgd, rng, _rng(seed, i, _META), losses)
        elif kind == "EWC":
            train_ewc(model, task, fisher, cfg.lam, cfg.sgd, rng, _rng(seed, i, _FISHER), losses=losses)
        elif kind == "L2REG":
            train_l2reg(model, task, fisher, cfg.lam, cfg.sgd, rng, losses=losses)
        trace.snapshots.append(model.clone())
        trace.losses.append(losses)
        log.debug("%s task %d done, final loss %.4f", kind, i, losses[-1] if losses else float("nan"))
    return trace


def select_hyperparameter(candidates: Sequence[float], score: Callable[[float], float]) -> float:
    """Candidate with the highest score; ties go to the smaller value."""
    if not candidates:
        raise ValueError("no candidates")
    best = None
    for v in sorted(candidates):
        s = score(v)
        if best is None or s > best[1]:
            best = (v, s)
    return best[0]
