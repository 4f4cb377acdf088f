"""Training loop for the classifier head over frozen backbone features."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .dataset import DatasetManifest, Split
from .nnhead import (
    LOG2,
    NATURAL,
    HeadParameters,
    cross_entropy,
    head_backward,
    head_forward,
    init_head,
    pooled_shape,
)

log = logging.getLogger(__name__)


class Optimizer(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 80
    steps_per_epoch: int = 42
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: Optimizer = Optimizer.ADAM
    seed: int = 0
    loss_base: str = LOG2

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if self.loss_base not in (LOG2, NATURAL):
            raise ValueError(f"loss_base must be {LOG2!r} or {NATURAL!r}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["optimizer"] = self.optimizer.value
        return json.dumps(doc, indent=2)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "accuracy", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), f"{r.seconds:.6f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["accuracy"]),
                                float(r["seconds"])) for r in rows])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimizer_step(params: HeadParameters, grads, state: AdamState | None,
                   cfg: TrainConfig) -> tuple[HeadParameters, AdamState | None]:
    """Return updated parameters and optimizer state; inputs are not mutated."""
    ps, gs = params.arrays(), grads.arrays()
    for p, g in zip(ps, gs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    lr = np.float32(cfg.learning_rate)
    if cfg.optimizer is Optimizer.SGD:
        return HeadParameters(*(p - lr * g for p, g in zip(ps, gs))), state

    if state is None:
        state = AdamState([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps])
    t = state.t + 1
    b1, b2 = np.float32(ADAM_BETA1), np.float32(ADAM_BETA2)
    c1 = np.float32(1.0 - ADAM_BETA1 ** t)
    c2 = np.float32(1.0 - ADAM_BETA2 ** t)
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + np.float32(ADAM_EPS)))
        new_m.append(m)
        new_v.append(v)
    return HeadParameters(*new_p), AdamState(new_m, new_v, t)


class CyclingSampler:
    """Yields index batches from successive seeded shuffles of range(n)."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_batch(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.intp)
        filled = 0
        while filled < size:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(size - filled, self.n - self.pos)
            out[filled:filled + take] = self.order[self.pos:self.pos + take]
            filled += take
            self.pos += take
        return out


def split_rngs(seed: int) -> tuple[np.random.Generator, ...]:
    """Independent generators for (init, sampling, dropout)."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def fit(features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
        params: HeadParameters | None = None,
        on_epoch=None) -> tuple[HeadParameters, TrainHistory]:
    """Train on an (N, H, W, C) feature array with integer labels (0 = MASK)."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.intp)
    n = features.shape[0]
    if n == 0:
        raise TrainingError("empty TRAIN split")
    init_rng, sample_rng, drop_rng = split_rngs(cfg.seed)
    if params is None:
        ph, pw, c = pooled_shape(features.shape)
        params = init_head(ph * pw * c, init_rng)
    onehots = np.eye(2, dtype=np.float32)[labels]
    sampler = CyclingSampler(n, sample_rng)
    state = None
    history = TrainHistory()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        seen = 0
        for step in range(1, cfg.steps_per_epoch + 1):
            idx = sampler.next_batch(cfg.batch_size)
            trace = head_forward(features[idx], params, train=True, rng=drop_rng)
            loss = cross_entropy(trace.probs, onehots[idx], cfg.loss_base)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = head_backward(trace, onehots[idx], params, cfg.loss_base)
            params, state = optimizer_step(params, grads, state, cfg)
            loss_sum += loss
            correct += int(np.sum(trace.probs.argmax(axis=1) == labels[idx]))
            seen += len(idx)
        rec = EpochRecord(epoch, loss_sum / cfg.steps_per_epoch, correct / seen,
                          time.perf_counter() - t0)
        history.records.append(rec)
        log.debug("epoch %d loss %.6f acc %.4f", epoch, rec.loss, rec.accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    return params, history


def train(manifest: DatasetManifest, backbone: Backbone, cfg: TrainConfig,
          on_epoch=None) -> tuple[HeadParameters, TrainHistory]:
    records = manifest.split(Split.TRAIN)
    if not records:
        raise TrainingError("empty TRAIN split")
    features = backbone.record_features(manifest, records)
    labels = np.array([r.label.index for r in records])
    return fit(features, labels, cfg, on_epoch=on_epoch)
