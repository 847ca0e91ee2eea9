"""Synthetic Gaussian-cluster benchmarks, k-shot sampling and the replay buffer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MEAN_RADIUS = 3.0
MIN_MEAN_GAP = 1e-6
MAX_RETRIES = 100


class GenerationError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


class Example(NamedTuple):
    x: np.ndarray
    y: int
    t: int


@dataclass(frozen=True)
class Split:
    x: np.ndarray  # (n, input_dim)
    y: np.ndarray  # (n,) task-local labels

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class TaskDataset:
    """One task. ``classes[c]`` is the global id of task-local class ``c``."""

    task_id: int
    train: Split
    val: Split
    test: Split
    classes: tuple[int, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def examples(self, split: str = "train") -> Iterator[Example]:
        s = self.split(split)
        for x, y in zip(s.x, s.y):
            yield Example(x, int(y), self.task_id)

    def global_labels(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.classes)[y]


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[TaskDataset, ...]
    regime: str  # "disjoint" | "drifting"
    input_dim: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> TaskDataset:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def total_classes(self) -> int:
        return len({c for t in self.tasks for c in t.classes})

    def reordered(self, order: Sequence[int]) -> "TaskSequence":
        """Same tasks in a new order; task ids are renumbered 0..N-1 by position."""
        if sorted(order) != list(range(len(self.tasks))):
            raise ValueError(f"not a permutation of {len(self.tasks)} tasks: {order}")
        tasks = tuple(
            TaskDataset(pos, t.train, t.val, t.test, t.classes)
            for pos, t in enumerate(self.tasks[i] for i in order)
        )
        return TaskSequence(tasks, self.regime, self.input_dim)


def _unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _class_means(rng: np.random.Generator, n: int, dim: int, signal_dim: int | None = None) -> np.ndarray:
    basis = None
    if signal_dim is not None:
        if not 1 <= signal_dim <= dim:
            raise ValueError(f"signal_dim must lie in [1, {dim}], got {signal_dim}")
        # random orthonormal basis of the shared signal subspace
        basis = np.linalg.qr(rng.standard_normal((dim, signal_dim)))[0].T
    for _ in range(MAX_RETRIES):
        if basis is None:
            mu = MEAN_RADIUS * _unit_vectors(rng, n, dim)
        else:
            mu = MEAN_RADIUS * _unit_vectors(rng, n, signal_dim) @ basis
        if n < 2:
            return mu
        d = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=-1)
        d[np.diag_indices(n)] = np.inf
        if d.min() >= MIN_MEAN_GAP:
            return mu
    raise GenerationError(f"could not draw {n} distinct class means in {MAX_RETRIES} tries")


def _check_counts(per_class: Sequence[int], sigma: float) -> tuple[int, int, int]:
    if len(per_class) != 3 or min(per_class) < 1:
        raise ValueError(f"per_class must be three counts >= 1, got {per_class}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return tuple(int(c) for c in per_class)


def _draw_split(rng, means: np.ndarray, count: int, sigma: float) -> Split:
    c, dim = means.shape
    y = np.repeat(np.arange(c), count)
    x = means[y] + sigma * rng.standard_normal((len(y), dim))
    return Split(x, y)


def gen_split_benchmark(
    n_tasks: int = 5,
    classes_per_task: int = 2,
    input_dim: int = 16,
    per_class: Sequence[int] = (200, 50, 100),
    seed: int = 0,
    sigma: float = 1.0,
    signal_dim: int | None = None,
) -> TaskSequence:
    """Disjoint-class benchmark: task ``t`` owns global classes ``t*cpt .. (t+1)*cpt - 1``.

    Class means are uniform on the radius-3 sphere of the input space, or, with
    ``signal_dim``, of a random ``signal_dim``-dimensional subspace shared by all
    tasks (related tasks; noise stays isotropic in every input dimension).
    """
    n_tr, n_va, n_te = _check_counts(per_class, sigma)
    if n_tasks < 1 or classes_per_task < 1 or input_dim < 1:
        raise ValueError("n_tasks, classes_per_task and input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    mu = _class_means(rng, n_tasks * classes_per_task, input_dim, signal_dim)
    tasks = []
    for t in range(n_tasks):
        cls = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        m = mu[list(cls)]
        tasks.append(
            TaskDataset(
                t,
                _draw_split(rng, m, n_tr, sigma),
                _draw_split(rng, m, n_va, sigma),
                _draw_split(rng, m, n_te, sigma),
                cls,
            )
        )
    return TaskSequence(tuple(tasks), "disjoint", input_dim)


def gen_drifting_benchmark(
    n_tasks: int = 10,
    n_classes: int = 4,
    drift_step: float = 0.2,
    input_dim: int = 16,
    per_class: Sequence[int] = (200, 50, 100),
    seed: int = 0,
    sigma: float = 1.0,
) -> TaskSequence:
    """Shared label set whose class means translate by ``drift_step`` per task."""
    n_tr, n_va, n_te = _check_counts(per_class, sigma)
    if drift_step < 0:
        raise ValueError(f"drift_step must be >= 0, got {drift_step}")
    rng = np.random.default_rng(seed)
    mu = _class_means(rng, n_classes, input_dim)
    direction = _unit_vectors(rng, n_classes, input_dim)
    cls = tuple(range(n_classes))
    tasks = []
    for t in range(n_tasks):
        m = mu + t * drift_step * direction
        tasks.append(
            TaskDataset(
                t,
                _draw_split(rng, m, n_tr, sigma),
                _draw_split(rng, m, n_va, sigma),
                _draw_split(rng, m, n_te, sigma),
                cls,
            )
        )
    return TaskSequence(tuple(tasks), "drifting", input_dim)


def gen_upstream_task(
    n_classes: int = 10,
    input_dim: int = 16,
    per_class: Sequence[int] = (200, 50, 100),
    seed: int = 12345,
    sigma: float = 1.0,
) -> TaskDataset:
    """Stand-alone pretraining task (task id -1) in the same input space."""
    seq = gen_split_benchmark(1, n_classes, input_dim, per_class, seed, sigma)
    t = seq[0]
    return TaskDataset(-1, t.train, t.val, t.test, t.classes)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KShotSample:
    x: np.ndarray
    y: np.ndarray
    k: int
    seed: int


def _per_class_draw(split: Split, n_classes: int, k: int, rng, strict: bool) -> np.ndarray:
    picked = []
    for c in range(n_classes):
        idx = np.flatnonzero(split.y == c)
        if len(idx) < k and strict:
            raise SamplingError(f"class {c} has {len(idx)} train examples, need k={k}")
        take = min(k, len(idx))
        picked.append(np.sort(rng.choice(idx, size=take, replace=False)))
    return np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)


def sample_kshot(task: TaskDataset, k: int, seed: int) -> KShotSample:
    """Exactly ``k`` train examples per class, drawn without replacement."""
    if k < 1:
        raise SamplingError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    idx = _per_class_draw(task.train, task.n_classes, k, rng, strict=True)
    s = task.train.take(idx)
    return KShotSample(s.x, s.y, k, seed)


@dataclass
class ReplayBuffer:
    """Per-task episodic memories M_i holding at most ``m`` examples per class."""

    m: int
    stores: dict[int, Split] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(s) for s in self.stores.values())

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.stores)

    def union(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All stored examples as ``(x, y, task_id)`` arrays, in task order."""
        ids = self.task_ids
        if not ids:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        x = np.concatenate([self.stores[t].x for t in ids])
        y = np.concatenate([self.stores[t].y for t in ids])
        t = np.concatenate([np.full(len(self.stores[i]), i) for i in ids])
        return x, y, t


def update_replay_buffer(buffer: ReplayBuffer, task: TaskDataset, m: int, seed: int) -> ReplayBuffer:
    """Store ``min(m, class size)`` uniformly drawn train examples per class of ``task``."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    idx = _per_class_draw(task.train, task.n_classes, m, rng, strict=False)
    buffer.stores[task.task_id] = task.train.take(idx)
    return buffer


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def dump_benchmark(seq: TaskSequence, path, split: str = "train") -> None:
    """Columnar text dump: ``task label f0 f1 ...`` one example per line (global labels)."""
    with open(path, "w") as fh:
        dim = seq.input_dim
        fh.write("task\tlabel\t" + "\t".join(f"f{i}" for i in range(dim)) + "\n")
        for task in seq:
            s = task.split(split)
            labels = task.global_labels(s.y)
            for x, lab in zip(s.x, labels):
                fh.write(f"{task.task_id}\t{lab}\t" + "\t".join(repr(float(v)) for v in x) + "\n")
