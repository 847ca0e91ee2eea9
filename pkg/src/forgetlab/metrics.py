"""Accuracy matrix, forgetting / accuracy aggregates, k-shot transfer and feature diversity.

Every evaluation here works on frozen snapshots or deep copies; nothing
mutates the feature extractor it is handed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DomainError, Tensor
from .learners import TrainTrace, targets_for
from .nn import ContinualModel, FeatureExtractor, Linear, sgd_step
from .tasks import TaskDataset, TaskSequence, minibatches, sample_kshot

SCHEMA_VERSION = 1
PROBE_LR = 0.01
PROBE_EPOCHS = 100
FDIV_EPS = 0.5
UPSTREAM_PROBE_EPOCHS = 10  # full-train-set probe, far more steps per epoch than k-shot


class EvaluationError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# accuracy matrix and its aggregates
# ---------------------------------------------------------------------------


@dataclass
class AccuracyMatrix:
    """Lower-triangular ``Acc(i, j)``, 0-based: accuracy on task j after training through task i."""

    values: np.ndarray  # (N, N); NaN above the diagonal

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        n = len(rows)
        a = np.full((n, n), np.nan)
        for i, row in enumerate(rows):
            if len(row) != i + 1:
                raise ValueError(f"row {i} must have {i + 1} entries, got {len(row)}")
            a[i, : i + 1] = row
        return cls(a)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, ij) -> float:
        i, j = ij
        if j > i:
            raise IndexError(f"Acc({i}, {j}) is above the diagonal")
        return float(self.values[i, j])

    def rows(self) -> list[list[float]]:
        return [[float(v) for v in self.values[i, : i + 1]] for i in range(self.n)]


def accuracy(model: ContinualModel, task: TaskDataset, split: str = "test") -> float:
    s = task.split(split)
    pred = model.logits(s.x, task.task_id).argmax(axis=1)
    return float(np.mean(pred == targets_for(model, task, s.y)))


def fill_accuracy_matrix(trace: TrainTrace, seq: TaskSequence, split: str = "test") -> AccuracyMatrix:
    n = len(seq)
    if len(trace.snapshots) < n:
        raise EvaluationError(f"trace has {len(trace.snapshots)} checkpoints, need {n}")
    a = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1):
            a[i, j] = accuracy(trace.snapshots[i], seq[j], split)
    return AccuracyMatrix(a)


def forgetting_per_task(acc: AccuracyMatrix) -> list[float]:
    """Fgt_i for i = 2..N (1-based), i.e. mean over j<i of Acc(i,j) - Acc(j,j)."""
    a = acc.values
    out = []
    for i in range(1, acc.n):
        out.append(sum(a[i, j] - a[j, j] for j in range(i)) / i)
    return out


def avg_forgetting(acc: AccuracyMatrix) -> float:
    if acc.n < 2:
        raise UndefinedMetricError("average forgetting needs at least 2 tasks")
    f = forgetting_per_task(acc)
    return sum(f) / len(f)


def avg_accuracy(acc: AccuracyMatrix) -> float:
    n = acc.n
    return sum(acc.values[n - 1, j] for j in range(n)) / n


def avg_learning_accuracy(acc: AccuracyMatrix) -> float:
    n = acc.n
    return sum(acc.values[j, j] for j in range(n)) / n


def avg_fwt(records: Mapping[int, Sequence[float]]) -> dict[int, float]:
    """Per k, mean of Fwt^k_j over boundaries."""
    return {k: sum(v) / len(v) for k, v in records.items()}


# ---------------------------------------------------------------------------
# forward transfer
# ---------------------------------------------------------------------------


def _probe_head(feats: np.ndarray, y: np.ndarray, n_classes: int, lr: float, epochs: int,
                batch_size: int, rng: np.random.Generator) -> Linear:
    head = Linear(feats.shape[1], n_classes)  # zero init
    params = head.parameters()
    for _ in range(epochs):
        for idx in minibatches(len(y), batch_size, rng):
            ag.backward(ag.cross_entropy(head(Tensor(feats[idx])), y[idx]))
            sgd_step(params, lr)
    return head


def _head_accuracy(head: Linear, feats: np.ndarray, y: np.ndarray) -> float:
    with ag.no_grad():
        pred = head(Tensor(feats)).data.argmax(axis=1)
    return float(np.mean(pred == y))


def kshot_probe_fwt(
    phi: FeatureExtractor,
    next_task: TaskDataset,
    k: int,
    seed: int,
    lr: float = PROBE_LR,
    epochs: int = PROBE_EPOCHS,
) -> float:
    """Test accuracy of a zero-initialised linear head trained on ``k`` shots over frozen ``phi``."""
    sample = sample_kshot(next_task, k, seed)
    c = next_task.n_classes
    rng = np.random.default_rng([seed, k, 1])
    head = _probe_head(phi.features(sample.x), sample.y, c, lr, epochs, min(k * c, 50), rng)
    return _head_accuracy(head, phi.features(next_task.test.x), next_task.test.y)


def _finetune(phi: FeatureExtractor, task: TaskDataset, x, y, lr, epochs, batch_size, rng):
    phi = phi.clone()
    head = Linear(phi.feature_dim, task.n_classes)
    params = phi.parameters() + head.parameters()
    for _ in range(epochs):
        for idx in minibatches(len(y), batch_size, rng):
            ag.backward(ag.cross_entropy(head(phi(Tensor(x[idx]))), y[idx]))
            sgd_step(params, lr)
    return phi, head


def kshot_finetune_fwt(
    phi: FeatureExtractor,
    next_task: TaskDataset,
    k: int,
    seed: int,
    lr_grid: Sequence[float] = (0.01, 0.001),
    epoch_grid: Sequence[int] = (10, 50, 100),
) -> float:
    """Fine-tune a copy of ``phi`` plus a fresh head on ``k`` shots; (lr, epochs) picked on validation."""
    sample = sample_kshot(next_task, k, seed)
    c = next_task.n_classes
    bs = min(k * c, 50)
    best = None
    for lr, ep in itertools.product(sorted(lr_grid), sorted(epoch_grid)):
        rng = np.random.default_rng([seed, k, 2])
        tuned_phi, head = _finetune(phi, next_task, sample.x, sample.y, lr, ep, bs, rng)
        if len(lr_grid) * len(epoch_grid) == 1:
            best = (0.0, tuned_phi, head)
            break
        val = _head_accuracy(head, tuned_phi.features(next_task.val.x), next_task.val.y)
        if best is None or val > best[0]:
            best = (val, tuned_phi, head)
    _, tuned_phi, head = best
    return _head_accuracy(head, tuned_phi.features(next_task.test.x), next_task.test.y)


# ---------------------------------------------------------------------------
# feature diversity
# ---------------------------------------------------------------------------


def _logdet_shifted_gram(psi: np.ndarray, alpha: float) -> float:
    """log|I + alpha * psi^T psi| from the singular values of psi."""
    if psi.size == 0:
        return 0.0
    s = np.linalg.svd(psi, compute_uv=False)
    return float(np.sum(np.log1p(alpha * s * s)))


def feature_diversity(
    psi: np.ndarray,
    labels: np.ndarray,
    eps: float = FDIV_EPS,
    class_alpha: str = "per_class",
) -> float:
    """log|alpha Psi^T Psi + I| - sum_c log|alpha_c Psi_c^T Psi_c + I|.

    ``alpha = D / (m eps^2)``. With ``class_alpha="per_class"`` each class uses
    its own row count ``m_c``; ``"task"`` reuses ``m`` for every class.
    """
    psi = np.asarray(psi, dtype=np.float64)
    labels = np.asarray(labels)
    if psi.ndim != 2 or psi.shape[0] < 1 or psi.shape[1] < 1:
        raise DomainError(f"feature matrix must be m x D with m, D >= 1, got {psi.shape}")
    if len(labels) != psi.shape[0]:
        raise DomainError(f"{len(labels)} labels for {psi.shape[0]} feature rows")
    if class_alpha not in ("per_class", "task"):
        raise ValueError(f"class_alpha must be 'per_class' or 'task', got {class_alpha!r}")
    m, d = psi.shape
    total = _logdet_shifted_gram(psi, d / (m * eps * eps))
    within = 0.0
    for c in np.unique(labels):
        rows_c = psi[labels == c]
        if len(rows_c) == 0:
            raise DomainError(f"class {c} has no rows")
        m_c = len(rows_c) if class_alpha == "per_class" else m
        within += _logdet_shifted_gram(rows_c, d / (m_c * eps * eps))
    return total - within


def feature_diversity_dense(psi: np.ndarray, labels: np.ndarray, eps: float = FDIV_EPS) -> float:
    """Same score via explicit determinants (reference path for small D)."""
    psi = np.asarray(psi, dtype=np.float64)
    m, d = psi.shape
    eye = np.eye(d)
    total = math.log(np.linalg.det(d / (m * eps**2) * psi.T @ psi + eye))
    for c in np.unique(labels):
        p = psi[labels == c]
        total -= math.log(np.linalg.det(d / (len(p) * eps**2) * p.T @ p + eye))
    return total


def boundary_feature_diversity(phi: FeatureExtractor, next_task: TaskDataset, **kw) -> float:
    return feature_diversity(phi.features(next_task.test.x), next_task.test.y, **kw)


def avg_feature_diversity(scores: Sequence[float]) -> float:
    if not scores:
        raise UndefinedMetricError("no boundaries")
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# upstream accuracy
# ---------------------------------------------------------------------------


def upstream_accuracy(
    phi: FeatureExtractor | None,
    upstream: TaskDataset | None,
    head: Linear | None = None,
    probe: bool = False,
    seed: int = 0,
) -> float:
    """Upstream test accuracy of ``phi`` with the preserved pretraining head, or a fresh probe."""
    if phi is None or upstream is None:
        raise EvaluationError("upstream accuracy needs a pretrained run with its upstream task")
    if probe:
        feats = phi.features(upstream.train.x)
        rng = np.random.default_rng([seed, 3])
        head = _probe_head(feats, upstream.train.y, upstream.n_classes, PROBE_LR, UPSTREAM_PROBE_EPOCHS, 50, rng)
    elif head is None:
        raise EvaluationError("upstream head missing; pass probe=True to fit one")
    return _head_accuracy(head, phi.features(upstream.test.x), upstream.test.y)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    acc_matrix: list[list[float]]
    avg_fgt: float
    avg_acc: float
    avg_lacc: float
    fwt: dict[str, dict[int, list[float]]] = field(default_factory=dict)  # mode -> k -> per boundary
    avg_fwt: dict[str, dict[int, float]] = field(default_factory=dict)
    fdiv: list[float] = field(default_factory=list)
    avg_fdiv: float | None = None
    upstream_acc: list[float] | None = None
    val_avg_lacc: float | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "acc_matrix": self.acc_matrix,
            "avg_fgt": self.avg_fgt,
            "avg_acc": self.avg_acc,
            "avg_lacc": self.avg_lacc,
            "fwt": {m: {str(k): v for k, v in d.items()} for m, d in self.fwt.items()},
            "avg_fwt": {m: {str(k): v for k, v in d.items()} for m, d in self.avg_fwt.items()},
            "fdiv": self.fdiv,
            "avg_fdiv": self.avg_fdiv,
            "upstream_acc": self.upstream_acc,
            "val_avg_lacc": self.val_avg_lacc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        conv = lambda dd: {m: {int(k): v for k, v in x.items()} for m, x in dd.items()}  # noqa: E731
        return cls(
            acc_matrix=d["acc_matrix"],
            avg_fgt=d["avg_fgt"],
            avg_acc=d["avg_acc"],
            avg_lacc=d["avg_lacc"],
            fwt=conv(d["fwt"]),
            avg_fwt=conv(d["avg_fwt"]),
            fdiv=d["fdiv"],
            avg_fdiv=d["avg_fdiv"],
            upstream_acc=d["upstream_acc"],
            val_avg_lacc=d.get("val_avg_lacc"),
        )
