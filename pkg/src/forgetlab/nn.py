"""MLP feature extractor, per-task linear heads, SGD and the cosine schedule.

Checkpoint format (``.flck``)::

    FLCK1\\n
    <one line of JSON: {"params": [{"name": ..., "shape": [...]}, ...], "meta": {...}}>\\n
    <raw little-endian float64 values of every param, concatenated in header order>

The header is written with sorted keys and no whitespace, so saving the same
parameters always yields the same bytes and loading is bit-exact.
"""

from __future__ import annotations

import copy
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor

MAGIC = b"FLCK1\n"


class ConfigError(ValueError):
    """Invalid model / optimizer configuration."""


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None):
        if fan_in < 1 or fan_out < 1:
            raise ConfigError(f"zero-width layer ({fan_in} -> {fan_out})")
        if rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            a = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class FeatureExtractor:
    """Phi: stack of linear layers with relu between and after every layer."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        widths = list(widths)
        if len(widths) < 2:
            raise ConfigError(f"need at least input and feature width, got {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"zero-width layer in {widths}")
        self.widths = widths
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = ag.relu(layer(h))
        return h

    def features(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without recording a graph."""
        with ag.no_grad():
            return self(Tensor(x)).data

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"phi.{i}.weight", layer.weight))
            out.append((f"phi.{i}.bias", layer.bias))
        return out

    def clone(self) -> "FeatureExtractor":
        return copy.deepcopy(self)

    def to_bytes(self) -> bytes:
        return dumps(self.named_parameters())


class HeadSet:
    """Task heads Theta_j. Multi-head keeps one head per started task; single-head shares one."""

    def __init__(self, feature_dim: int, mode: str = "multi", total_classes: int | None = None):
        if mode not in ("multi", "single"):
            raise ConfigError(f"unknown head mode {mode!r}")
        self.mode = mode
        self.feature_dim = feature_dim
        self.heads: dict[int, Linear] = {}
        self.shared_head: Linear | None = None
        if mode == "single":
            if not total_classes:
                raise ConfigError("single-head mode needs total_classes")
            self.shared_head = Linear(feature_dim, total_classes)

    def start_task(self, task_id: int, n_classes: int) -> None:
        if self.mode == "multi" and task_id not in self.heads:
            self.heads[task_id] = Linear(self.feature_dim, n_classes)

    def head(self, task_id: int) -> Linear:
        if self.mode == "single":
            return self.shared_head
        try:
            return self.heads[task_id]
        except KeyError:
            raise KeyError(f"no head for task {task_id}") from None

    def parameters(self, task_ids: Iterable[int] | None = None) -> list[Tensor]:
        if self.mode == "single":
            return self.shared_head.parameters()
        ids = sorted(self.heads) if task_ids is None else sorted(set(task_ids))
        return [p for t in ids for p in self.heads[t].parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if self.mode == "single":
            h = self.shared_head
            return [("head.shared.weight", h.weight), ("head.shared.bias", h.bias)]
        out = []
        for t in sorted(self.heads):
            out.append((f"head.{t}.weight", self.heads[t].weight))
            out.append((f"head.{t}.bias", self.heads[t].bias))
        return out


class ContinualModel:
    """Theta_j o Phi. Parameter order: Phi layers first, then heads by task id."""

    def __init__(self, extractor: FeatureExtractor, heads: HeadSet):
        self.extractor = extractor
        self.heads = heads

    def __call__(self, x, task_id: int) -> Tensor:
        return self.heads.head(task_id)(self.extractor(x))

    def logits(self, x: np.ndarray, task_id: int) -> np.ndarray:
        with ag.no_grad():
            return self(Tensor(x), task_id).data

    def parameters(self, task_ids: Iterable[int] | None = None) -> list[Tensor]:
        return self.extractor.parameters() + self.heads.parameters(task_ids)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.extractor.named_parameters() + self.heads.named_parameters()

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "ContinualModel":
        return copy.deepcopy(self)


def init_model(
    widths: Sequence[int],
    seed: int,
    head_mode: str = "multi",
    total_classes: int | None = None,
) -> ContinualModel:
    """Glorot-uniform MLP extractor with an empty head set."""
    if not widths:
        raise ConfigError("widths must be non-empty")
    rng = np.random.default_rng(seed)
    phi = FeatureExtractor(widths, rng)
    return ContinualModel(phi, HeadSet(phi.feature_dim, head_mode, total_classes))


def cosine_lr(r: float, t: int, n: int) -> float:
    """``r * cos(t*pi / (2n))``, decaying from ``r`` at t=0 to 0 at t=n."""
    if n < 1:
        raise ContractError(f"cosine_lr: n must be >= 1, got {n}")
    if t < 0 or t > n:
        raise ContractError(f"cosine_lr: step {t} outside [0, {n}]")
    if t == n:
        return 0.0
    return r * math.cos(t * math.pi / (2 * n))


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def steps(self, n_examples: int) -> int:
        return self.epochs * math.ceil(n_examples / self.batch_size)

    def rate(self, t: int, n: int) -> float:
        return cosine_lr(self.lr, t, n) if self.schedule == "cosine" else self.lr


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * p.grad`` followed by zeroing grads."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p.name or p.shape} has no grad")
    for p in params:
        if lr != 0.0:
            p.data -= lr * p.grad
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def dumps(named: Sequence[tuple[str, Tensor]], meta: dict | None = None) -> bytes:
    header = {
        "params": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    buf.write(b"\n")
    for _, t in named:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise ValueError("not a forgetlab checkpoint")
    rest = blob[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = memoryview(rest)[nl + 1:]
    out: dict[str, np.ndarray] = {}
    off = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) * 8
        out[spec["name"]] = np.frombuffer(body[off:off + n], dtype="<f8").reshape(shape).copy()
        off += n
    if off != len(body):
        raise ValueError("checkpoint body length does not match header")
    return out, header["meta"]


def write_atomic(path: str | os.PathLike, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_extractor(phi: FeatureExtractor, path) -> None:
    write_atomic(path, dumps(phi.named_parameters(), {"widths": phi.widths}))


def load_extractor(path) -> FeatureExtractor:
    arrays, meta = loads(Path(path).read_bytes())
    phi = FeatureExtractor(meta["widths"], np.random.default_rng(0))
    for name, t in phi.named_parameters():
        t.data = arrays[name]
    return phi


def save_model(model: ContinualModel, path) -> None:
    h = model.heads
    meta = {
        "widths": model.extractor.widths,
        "head_mode": h.mode,
        "head_classes": {str(t): h.heads[t].out_dim for t in sorted(h.heads)},
        "total_classes": h.shared_head.out_dim if h.shared_head else None,
    }
    write_atomic(path, dumps(model.named_parameters(), meta))


def load_model(path) -> ContinualModel:
    arrays, meta = loads(Path(path).read_bytes())
    model = init_model(meta["widths"], 0, meta["head_mode"], meta["total_classes"])
    for t, c in meta["head_classes"].items():
        model.heads.start_task(int(t), c)
    for name, t in model.named_parameters():
        t.data = arrays[name]
    return model
