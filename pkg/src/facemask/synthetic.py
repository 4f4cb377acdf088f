"""Synthetic fixtures: separable embedding sets and toy face images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import EmbeddingStore
from .dataset import DatasetManifest, ImageBuffer, Label, Record, Split, encode_image


def separable_embeddings(n: int = 200, n_train: int = 140, dims=(5, 5, 8),
                         separation: float = 4.0, seed: int = 0
                         ) -> tuple[DatasetManifest, EmbeddingStore]:
    """Two Gaussian classes (unit sigma) whose means differ by ``separation``
    along the first channel, balanced and randomly interleaved."""
    rng = np.random.default_rng(seed)
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2))
    rng.shuffle(labels)
    store = EmbeddingStore(tuple(dims))
    records = []
    for i, y in enumerate(labels):
        fm = rng.standard_normal(dims).astype(np.float32)
        if y == 1:
            fm[..., 0] += np.float32(separation)
        key = f"emb/{i:04d}.ppm"
        store.add(key, fm)
        records.append(Record(key, Label.from_index(y), Split.TRAIN if i < n_train else Split.TEST))
    return DatasetManifest(records), store


def random_embeddings(n: int = 32, dims=(5, 5, 32), seed: int = 0
                      ) -> tuple[DatasetManifest, EmbeddingStore]:
    """``n`` i.i.d. standard-normal maps with uniformly random labels."""
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(tuple(dims))
    records = []
    for i in range(n):
        key = f"rand/{i:04d}.ppm"
        store.add(key, rng.standard_normal(dims).astype(np.float32))
        records.append(Record(key, Label.from_index(rng.integers(2)), Split.TRAIN))
    return DatasetManifest(records), store


def toy_face(label: Label, size: int = 64, rng: np.random.Generator | None = None) -> ImageBuffer:
    """Gray background, skin-toned oval; MASK faces carry a bright lower band,
    NO_MASK faces a dark mouth region."""
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    px = np.empty((size, size, 3), dtype=np.float64)
    px[:] = 90 + rng.uniform(-10, 10)
    face = ((xx - c) / (0.38 * size)) ** 2 + ((yy - c) / (0.46 * size)) ** 2 <= 1
    px[face] = (205, 170, 140)
    lower = face & (yy > c + 0.05 * size)
    if label is Label.MASK:
        px[lower] = (245, 245, 245)
    else:
        mouth = lower & (np.abs(xx - c) < 0.15 * size) & (np.abs(yy - (c + 0.25 * size)) < 0.05 * size)
        px[mouth] = (60, 20, 20)
    px += rng.normal(0, 4, px.shape)
    return ImageBuffer(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def write_face_dataset(root: str | Path, n_per_class: int = 12, test_fraction: float = 0.25,
                       size: int = 64, seed: int = 0) -> Path:
    """Write toy face PPMs plus ``manifest.csv`` under ``root``; returns the manifest path."""
    from .dataset import write_manifest

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(n_per_class * test_fraction)))
    records = []
    for label in (Label.MASK, Label.NO_MASK):
        for i in range(n_per_class):
            rel = f"images/{label.value}_{i:03d}.ppm"
            encode_image(toy_face(label, size, rng), root / rel)
            split = Split.TEST if i < n_test else Split.TRAIN
            records.append(Record(rel, label, split))
    manifest = DatasetManifest(records, root=root)
    path = root / "manifest.csv"
    write_manifest(manifest, path)
    return path


def write_scene(root: str | Path, face_size: int = 64, seed: int = 1) -> tuple[Path, Path, list[Label]]:
    """A 2-face scene (MASK left, NO_MASK right) with its boxes file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = face_size + 40, 2 * face_size + 60
    px = np.full((h, w, 3), 90, dtype=np.uint8)
    boxes = []
    truth = [Label.MASK, Label.NO_MASK]
    for k, label in enumerate(truth):
        x, y = 20 + k * (face_size + 20), 30
        px[y:y + face_size, x:x + face_size] = toy_face(label, face_size, rng).pixels
        boxes.append([x, y, face_size, face_size])
    img_path = root / "scene.ppm"
    encode_image(ImageBuffer(px), img_path)
    boxes_path = root / "boxes.jsonl"
    boxes_path.write_text(json.dumps({"image": "scene.ppm", "boxes": boxes}) + "\n")
    return img_path, boxes_path, truth
