"""Frozen feature extractors feeding the classifier head.

Two sources are supported: an :class:`EmbeddingStore` of precomputed maps
(the FMDEMB1 file format, filled by an external InceptionV3 exporter) and a
small seeded convolutional network used for self-contained runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, ImageBuffer, Record, decode_image

EMB_MAGIC = b"FMDEMB1\n"
INCEPTION_DIMS = (5, 5, 2048)
BUILTIN_INPUT = 224
BUILTIN_SEED = 20200915
BUILTIN_CHANNELS = (3, 8, 16, 32, 32, 32)
# (stride, padding) per stage: 224 -> 112 -> 56 -> 28 -> 14 -> 5
BUILTIN_STAGES = ((2, 1), (2, 1), (2, 1), (2, 1), (3, 1))


class EmbeddingFormatError(ValueError):
    pass


class FeatureMap:
    """H x W x C float32 tensor."""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 3:
            raise ValueError(f"feature map must be H x W x C, got shape {values.shape}")
        if values.shape[0] < 5 or values.shape[1] < 5:
            raise ValueError(f"feature map must be at least 5x5 spatially, got {values.shape[:2]}")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature map contains non-finite values")
        self.values = values

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()

    def __repr__(self):
        return f"FeatureMap{self.shape}"


@dataclass
class EmbeddingStore:
    dims: tuple[int, int, int]
    entries: dict[str, FeatureMap] = field(default_factory=dict)

    def add(self, key: str, fm: FeatureMap | np.ndarray) -> None:
        if not isinstance(fm, FeatureMap):
            fm = FeatureMap(fm)
        if fm.shape != tuple(self.dims):
            raise ValueError(f"{key}: dims {fm.shape} != store dims {tuple(self.dims)}")
        if key in self.entries:
            raise ValueError(f"duplicate embedding key {key!r}")
        self.entries[key] = fm

    def __getitem__(self, key: str) -> FeatureMap:
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"no embedding for {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def write_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    h, w, c = store.dims
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<4I", len(store.entries), h, w, c))
        for key, fm in store.entries.items():
            kb = key.encode("utf-8")
            if len(kb) > 0xFFFF:
                raise ValueError(f"key too long: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingStore:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise EmbeddingFormatError(f"cannot read {path}: {exc}") from exc
    if buf[:8] != EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 24:
        raise EmbeddingFormatError(f"{path}: truncated header")
    count, h, w, c = struct.unpack_from("<4I", buf, 8)
    store = EmbeddingStore((h, w, c))
    nbytes = 4 * h * w * c
    pos = 24
    for i in range(count):
        if pos + 2 > len(buf):
            raise EmbeddingFormatError(f"{path}: truncated at record {i}")
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + klen + nbytes > len(buf):
            raise EmbeddingFormatError(f"{path}: truncated at record {i}")
        key = buf[pos:pos + klen].decode("utf-8")
        pos += klen
        values = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=pos)
        pos += nbytes
        if key in store:
            raise EmbeddingFormatError(f"{path}: duplicate key {key!r}")
        try:
            store.add(key, values.astype(np.float32).reshape(h, w, c))
        except ValueError as exc:
            raise EmbeddingFormatError(f"{path}: record {i}: {exc}") from None
    if pos != len(buf):
        raise EmbeddingFormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} records")
    return store


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of x (H, W, Cin) with w (k, k, Cin, Cout)."""
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (xp.shape[0] - k) // stride + 1
    wo = (xp.shape[1] - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            patch = xp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += patch @ w[i, j]
    return out + b


class BuiltinBackbone:
    """Five 3x3 conv + ReLU stages, 224x224x3 -> 5x5x32, fixed seeded weights."""

    def __init__(self, seed: int = BUILTIN_SEED):
        rng = np.random.default_rng(seed)
        self.layers = []
        for cin, cout in zip(BUILTIN_CHANNELS[:-1], BUILTIN_CHANNELS[1:]):
            w = rng.uniform(-0.1, 0.1, size=(3, 3, cin, cout)).astype(np.float32)
            b = rng.uniform(-0.1, 0.1, size=cout).astype(np.float32)
            w.flags.writeable = False
            b.flags.writeable = False
            self.layers.append((w, b))

    def __call__(self, img: ImageBuffer) -> FeatureMap:
        if img.height != BUILTIN_INPUT or img.width != BUILTIN_INPUT:
            raise ValueError(
                f"builtin backbone expects {BUILTIN_INPUT}x{BUILTIN_INPUT} input, "
                f"got {img.width}x{img.height}"
            )
        x = img.pixels
        if x.shape[2] == 1:
            x = np.repeat(x, 3, axis=2)
        # raw 0-255 intensities: the +-0.1 weights attenuate every stage, and
        # [0, 1] inputs leave class differences near float noise at the output
        x = x.astype(np.float32)
        for (w, b), (stride, pad) in zip(self.layers, BUILTIN_STAGES):
            x = np.maximum(conv2d(x, w, b, stride, pad), 0.0)
        return FeatureMap(x)


class Backbone:
    """Selects a feature source; ``features`` is the single entry point."""

    def __init__(self, store: EmbeddingStore | None = None, builtin: BuiltinBackbone | None = None):
        if (store is None) == (builtin is None):
            raise ValueError("exactly one of store / builtin must be given")
        self.store = store
        self.builtin = builtin

    @classmethod
    def embedding(cls, store: EmbeddingStore) -> "Backbone":
        return cls(store=store)

    @classmethod
    def default_builtin(cls) -> "Backbone":
        return cls(builtin=_shared_builtin())

    @property
    def kind(self) -> str:
        return "embedding" if self.store is not None else "builtin"

    def features(self, img: ImageBuffer | None = None, key: str | None = None) -> FeatureMap:
        if self.store is not None:
            if key is None:
                raise ValueError("embedding backbone needs a lookup key")
            return self.store[key]
        if img is None:
            raise ValueError("builtin backbone needs an image")
        return self.builtin(img)

    def record_features(self, manifest: DatasetManifest, records: list[Record]) -> np.ndarray:
        """Stack features for ``records`` into an (N, H, W, C) float32 array."""
        maps = []
        for rec in records:
            try:
                if self.store is not None:
                    fm = self.store[rec.path]
                else:
                    fm = self.builtin(decode_image(manifest.resolve(rec)))
            except (KeyError, ValueError) as exc:
                raise LookupError(f"features for {rec.path!r}: {exc}") from exc
            maps.append(fm.values)
        if not maps:
            raise ValueError("no records")
        shapes = {m.shape for m in maps}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent feature dims {sorted(shapes)}")
        return np.stack(maps)


_BUILTIN = None


def _shared_builtin() -> BuiltinBackbone:
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = BuiltinBackbone()
    return _BUILTIN


def extract_features(img: ImageBuffer | None, source: Backbone, key: str | None = None) -> FeatureMap:
    return source.features(img, key)
