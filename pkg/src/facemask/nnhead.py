"""Classifier head: avg-pool 5x5 -> flatten -> dense 128 + ReLU -> dropout 0.5
-> dense 2 + softmax, with hand-derived gradients.

Functions accept a single feature map (H, W, C) or a batch (N, H, W, C).
Batched losses and gradients are means over the batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

POOL = (5, 5)
HIDDEN = 128
CLASSES = 2
KEEP_PROB = 0.5
PROB_FLOOR = 1e-12
HEAD_MAGIC = b"FMDHEAD1"

LOG2 = "log2"
NATURAL = "natural"


class CheckpointError(ValueError):
    pass


@dataclass
class HeadParameters:
    W1: np.ndarray  # (flattened_dim, 128)
    b1: np.ndarray  # (128,)
    W2: np.ndarray  # (128, 2)
    b2: np.ndarray  # (2,)

    NAMES = ("W1", "b1", "W2", "b2")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        d, hidden = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape[0] != hidden or self.b2.shape != (self.W2.shape[1],):
            raise ValueError(
                f"inconsistent head shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("head parameters contain non-finite values")

    @property
    def flattened_dim(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "HeadParameters":
        return HeadParameters(*(a.copy() for a in self.arrays()))

    def bitwise_equal(self, other: "HeadParameters") -> bool:
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays(), other.arrays()))

    @classmethod
    def zeros(cls, flattened_dim: int, hidden: int = HIDDEN) -> "HeadParameters":
        return cls(np.zeros((flattened_dim, hidden)), np.zeros(hidden),
                   np.zeros((hidden, CLASSES)), np.zeros(CLASSES))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_head(flattened_dim: int, rng: np.random.Generator | int = 0,
              hidden: int = HIDDEN) -> HeadParameters:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return HeadParameters(
        glorot(rng, flattened_dim, hidden), np.zeros(hidden),
        glorot(rng, hidden, CLASSES), np.zeros(CLASSES),
    )


def pooled_shape(fm_shape, pool=POOL) -> tuple[int, int, int]:
    h, w, c = fm_shape[-3:]
    return h // pool[0], w // pool[1], c


def avgpool(fm: np.ndarray, pool: tuple[int, int] = POOL) -> np.ndarray:
    """Non-overlapping average pooling; partial windows at the edges are dropped."""
    fm = np.asarray(fm, dtype=np.float32)
    ph, pw = pool
    h, w, c = fm.shape[-3:]
    if h < ph or w < pw:
        raise ValueError(f"pool {pool} larger than input {h}x{w}")
    oh, ow = h // ph, w // pw
    lead = fm.shape[:-3]
    x = fm[..., :oh * ph, :ow * pw, :].reshape(*lead, oh, ph, ow, pw, c)
    # accumulate in float64: near-cancelling windows lose all precision in float32
    return x.mean(axis=(-4, -2), dtype=np.float64).astype(np.float32)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    pooled: np.ndarray
    flat: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    mask: np.ndarray  # kept units (all True in EVAL mode)
    z2: np.ndarray
    probs: np.ndarray
    train: bool


def head_forward(fm, params: HeadParameters, train: bool = False,
                 rng: np.random.Generator | None = None,
                 mask: np.ndarray | None = None) -> ForwardTrace:
    """Run the head on one map or a batch.

    In training mode a dropout keep-mask is drawn from ``rng`` unless an
    explicit ``mask`` is supplied; kept activations are scaled by 1/keep.
    """
    fm = fm.values if hasattr(fm, "values") else np.asarray(fm, dtype=np.float32)
    if not np.all(np.isfinite(fm)):
        raise ValueError("non-finite feature map")
    pooled = avgpool(fm)
    flat = pooled.reshape(*pooled.shape[:-3], -1)
    if flat.shape[-1] != params.flattened_dim:
        raise ValueError(
            f"head expects flattened dim {params.flattened_dim}, got {flat.shape[-1]} "
            f"from feature map {fm.shape}"
        )
    z1 = flat @ params.W1 + params.b1
    a1 = np.maximum(z1, np.float32(0))
    if train:
        if mask is None:
            if rng is None:
                raise ValueError("training-mode forward needs an rng or an explicit mask")
            mask = rng.random(a1.shape) < KEEP_PROB
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a1.shape:
            raise ValueError(f"dropout mask shape {mask.shape} != {a1.shape}")
        dropped = a1 * mask * np.float32(1.0 / KEEP_PROB)
    else:
        mask = np.ones(a1.shape, dtype=bool)
        dropped = a1
    z2 = dropped @ params.W2 + params.b2
    probs = softmax(z2).astype(np.float32)
    return ForwardTrace(pooled, flat, z1, a1, mask, z2, probs, bool(train))


def _log(p, base):
    p = np.maximum(p, PROB_FLOOR)
    return np.log2(p) if base == LOG2 else np.log(p)


def cross_entropy(probs, onehot, base: str = LOG2) -> float:
    """-sum(onehot * log(probs)), averaged over a leading batch axis if present."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs onehot {onehot.shape}")
    per_sample = -(onehot * _log(probs, base)).sum(axis=-1)
    return float(np.mean(per_sample))


@dataclass
class Gradients:
    dW1: np.ndarray
    db1: np.ndarray
    dW2: np.ndarray
    db2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.dW1, self.db1, self.dW2, self.db2]


def head_backward(trace: ForwardTrace, onehot, params: HeadParameters,
                  base: str = LOG2) -> Gradients:
    onehot = np.asarray(onehot, dtype=np.float32)
    if onehot.shape != trace.probs.shape:
        raise ValueError(f"onehot shape {onehot.shape} != probs shape {trace.probs.shape}")
    if trace.flat.shape[-1] != params.flattened_dim or trace.z1.shape[-1] != params.W1.shape[1]:
        raise ValueError("trace does not match parameters")
    batched = trace.probs.ndim == 2
    n = trace.probs.shape[0] if batched else 1

    # fused softmax + cross-entropy gradient; d/dz of -log2 p is (p - y) / ln 2
    dz2 = trace.probs - onehot
    if base == LOG2:
        dz2 = dz2 * np.float32(1.0 / math.log(2.0))
    dz2 = dz2 / np.float32(n)

    scale = np.float32(1.0 / KEEP_PROB) if trace.train else np.float32(1.0)
    dropped = trace.a1 * trace.mask * scale
    flat, z1 = trace.flat, trace.z1
    if not batched:
        dz2, dropped, flat, z1 = dz2[None], dropped[None], flat[None], z1[None]
        mask = trace.mask[None]
    else:
        mask = trace.mask

    dW2 = dropped.T @ dz2
    db2 = dz2.sum(axis=0)
    da1 = (dz2 @ params.W2.T) * mask * scale
    dz1 = da1 * (z1 > 0)
    dW1 = flat.T @ dz1
    db1 = dz1.sum(axis=0)
    return Gradients(dW1.astype(np.float32), db1.astype(np.float32),
                     dW2.astype(np.float32), db2.astype(np.float32))


def save_checkpoint(params: HeadParameters, path: str | Path) -> None:
    d, hidden = params.W1.shape
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<3I", d, hidden, params.W2.shape[1]))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> HeadParameters:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != HEAD_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 20:
        raise CheckpointError(f"{path}: truncated header")
    d, hidden, classes = struct.unpack_from("<3I", buf, 8)
    if hidden != HIDDEN or classes != CLASSES:
        raise CheckpointError(
            f"{path}: expected hidden={HIDDEN}, classes={CLASSES}; got hidden={hidden}, classes={classes}"
        )
    shapes = [(d, hidden), (hidden,), (hidden, classes), (classes,)]
    need = 20 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(buf) < need:
        raise CheckpointError(f"{path}: truncated ({len(buf)} of {need} bytes)")
    if len(buf) > need:
        raise CheckpointError(f"{path}: {len(buf) - need} trailing bytes")
    pos = 20
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(s))
        pos += 4 * n
    return HeadParameters(*arrays)
