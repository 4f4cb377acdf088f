"""Seeded image augmentation: shear, contrast, flip, rotate, zoom, blur,
followed by bilinear rescale and optional grayscale conversion."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetManifest,
    ImageBuffer,
    ImageFormatError,
    Record,
    Split,
    decode_image,
    encode_image,
)

TARGET_SIZE = (224, 224)
LUMA = (0.299, 0.587, 0.114)


class Kind(enum.Enum):
    SHEAR = "shear"
    CONTRAST = "contrast"
    FLIP_H = "flip_h"
    ROTATE = "rotate"
    ZOOM = "zoom"
    BLUR = "blur"
    RESCALE = "rescale"
    GRAYSCALE = "grayscale"


DEFAULT_RANGES = {
    Kind.SHEAR: (-0.2, 0.2),
    Kind.CONTRAST: (0.6, 1.4),
    Kind.FLIP_H: (0.0, 0.0),
    Kind.ROTATE: (-20.0, 20.0),
    Kind.ZOOM: (0.8, 1.25),
    Kind.BLUR: (1.0, 2.0),
}


@dataclass(frozen=True)
class TransformSpec:
    """One transform and its magnitude.

    Magnitude meaning by kind: SHEAR horizontal shear factor, CONTRAST gain
    about the image mean, ROTATE degrees counter-clockwise, ZOOM scale factor
    (>1 zooms in), BLUR box radius in pixels (rounded to an integer),
    RESCALE uniform scale factor unless ``size`` is given. FLIP_H and
    GRAYSCALE ignore it.
    """

    kind: Kind
    magnitude: float = 0.0
    size: tuple[int, int] | None = None

    def validate(self) -> None:
        m = self.magnitude
        if not math.isfinite(m):
            raise ValueError(f"{self.kind.value}: non-finite magnitude")
        if self.kind is Kind.ROTATE and abs(m) > 180:
            raise ValueError(f"rotate: |angle| must be <= 180, got {m}")
        if self.kind in (Kind.ZOOM, Kind.CONTRAST) and m <= 0:
            raise ValueError(f"{self.kind.value}: factor must be > 0, got {m}")
        if self.kind is Kind.BLUR and m < 0:
            raise ValueError(f"blur: radius must be >= 0, got {m}")
        if self.kind is Kind.RESCALE:
            if self.size is not None:
                if min(self.size) <= 0:
                    raise ValueError(f"rescale: bad target size {self.size}")
            elif m <= 0:
                raise ValueError(f"rescale: factor must be > 0, got {m}")


@dataclass
class AugmentConfig:
    transforms: list[tuple[Kind, tuple[float, float]]] = field(
        default_factory=lambda: list(DEFAULT_RANGES.items())
    )
    copies_per_image: int = 6
    seed: int = 0
    target_size: tuple[int, int] = TARGET_SIZE
    grayscale_output: bool = True

    def __post_init__(self):
        if self.copies_per_image < 0:
            raise ValueError("copies_per_image must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if min(self.target_size) <= 0:
            raise ValueError(f"target size must be positive, got {self.target_size}")
        for kind, (lo, hi) in self.transforms:
            if lo > hi:
                raise ValueError(f"{kind.value}: range lo > hi ({lo} > {hi})")
        if self.copies_per_image > 0 and not self.transforms:
            raise ValueError("no transforms configured")

    @classmethod
    def from_json(cls, text: str) -> "AugmentConfig":
        doc = json.loads(text)
        expected = {"transforms", "copies_per_image", "seed", "target_width",
                    "target_height", "grayscale_output"}
        if set(doc) != expected:
            raise ValueError(f"augment config keys must be exactly {sorted(expected)}")
        transforms = [(Kind(t["kind"]), (float(t["range"][0]), float(t["range"][1])))
                      for t in doc["transforms"]]
        return cls(
            transforms=transforms,
            copies_per_image=int(doc["copies_per_image"]),
            seed=int(doc["seed"]),
            target_size=(int(doc["target_width"]), int(doc["target_height"])),
            grayscale_output=bool(doc["grayscale_output"]),
        )

    def to_json(self) -> str:
        return json.dumps({
            "transforms": [{"kind": k.value, "range": [lo, hi]} for k, (lo, hi) in self.transforms],
            "copies_per_image": self.copies_per_image,
            "seed": self.seed,
            "target_width": self.target_size[0],
            "target_height": self.target_size[1],
            "grayscale_output": self.grayscale_output,
        }, indent=2)


def _to_u8(values: np.ndarray) -> np.ndarray:
    # round half up
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _sample_bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``src`` (H, W, C) at float coordinates; outside the frame is black."""
    h, w = src.shape[:2]
    # snap float noise (e.g. cos(90deg) != 0) so exact grid hits stay in frame
    sx = np.round(sx, 9)
    sy = np.round(sy, 9)
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    s = src.astype(np.float64)
    top = s[y0, x0] * (1 - fx) + s[y0, x1] * fx
    bot = s[y1, x0] * (1 - fx) + s[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~inside] = 0.0
    return out


def _inverse_warp(img: ImageBuffer, mapping) -> ImageBuffer:
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = mapping(xx - cx, yy - cy)
    return ImageBuffer(_to_u8(_sample_bilinear(img.pixels, sx + cx, sy + cy)))


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # output (dx, dy) pulls from the source point rotated by -t in y-down coords
    return _inverse_warp(img, lambda dx, dy: (c * dx - s * dy, s * dx + c * dy))


def shear(img: ImageBuffer, factor: float) -> ImageBuffer:
    return _inverse_warp(img, lambda dx, dy: (dx + factor * dy, dy))


def zoom(img: ImageBuffer, factor: float) -> ImageBuffer:
    return _inverse_warp(img, lambda dx, dy: (dx / factor, dy / factor))


def flip_h(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def contrast(img: ImageBuffer, factor: float) -> ImageBuffer:
    x = img.pixels.astype(np.float64)
    mean = x.mean()
    return ImageBuffer(_to_u8(mean + factor * (x - mean)))


def box_blur(img: ImageBuffer, radius: int) -> ImageBuffer:
    """Mean over a (2r+1)^2 window with edge replication."""
    r = int(radius)
    if r == 0:
        return img.copy()
    x = np.pad(img.pixels.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    # summed-area table
    sat = np.zeros((x.shape[0] + 1, x.shape[1] + 1, x.shape[2]))
    sat[1:, 1:] = x.cumsum(0).cumsum(1)
    k = 2 * r + 1
    h, w = img.height, img.width
    total = sat[k:k + h, k:k + w] - sat[:h, k:k + w] - sat[k:k + h, :w] + sat[:h, :w]
    return ImageBuffer(_to_u8(total / (k * k)))


def rescale(img: ImageBuffer, w: int, h: int) -> ImageBuffer:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    if w <= 0 or h <= 0:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    if img.width == 0 or img.height == 0:
        raise ValueError("cannot rescale an empty image")
    sx = (np.arange(w) + 0.5) * (img.width / w) - 0.5
    sy = (np.arange(h) + 0.5) * (img.height / h) - 0.5
    sx = np.clip(sx, 0, img.width - 1)
    sy = np.clip(sy, 0, img.height - 1)
    gx, gy = np.meshgrid(sx, sy)
    return ImageBuffer(_to_u8(_sample_bilinear(img.pixels, gx, gy)))


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    if img.channels != 3:
        raise ValueError("to_grayscale expects a 3-channel image")
    rgb = img.pixels.astype(np.float64)
    luma = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    # round half up; luma of equal channels lands within float noise of g
    return ImageBuffer(np.clip(np.floor(luma + 0.5 + 1e-9), 0, 255).astype(np.uint8)[..., None])


def apply_transform(img: ImageBuffer, spec: TransformSpec) -> ImageBuffer:
    if img.width == 0 or img.height == 0:
        raise ValueError("zero-sized image")
    spec.validate()
    k, m = spec.kind, spec.magnitude
    if k is Kind.FLIP_H:
        return flip_h(img)
    if k is Kind.CONTRAST:
        return contrast(img, m)
    if k is Kind.ROTATE:
        return rotate(img, m)
    if k is Kind.SHEAR:
        return shear(img, m)
    if k is Kind.ZOOM:
        return zoom(img, m)
    if k is Kind.BLUR:
        return box_blur(img, int(round(m)))
    if k is Kind.RESCALE:
        if spec.size is not None:
            return rescale(img, *spec.size)
        return rescale(img, max(1, round(img.width * m)), max(1, round(img.height * m)))
    if k is Kind.GRAYSCALE:
        return to_grayscale(img)
    raise ValueError(f"unknown transform {k}")


def path_hash(path: str) -> int:
    """Stable 64-bit hash of a record path."""
    return int.from_bytes(hashlib.blake2b(path.encode("utf-8"), digest_size=8).digest(), "little")


def record_rng(seed: int, path: str) -> np.random.Generator:
    return np.random.default_rng(seed ^ path_hash(path))


def sample_spec(rng: np.random.Generator, cfg: AugmentConfig) -> TransformSpec:
    kind, (lo, hi) = cfg.transforms[int(rng.integers(len(cfg.transforms)))]
    mag = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return TransformSpec(kind, mag)


def _finish(img: ImageBuffer, cfg: AugmentConfig) -> ImageBuffer:
    out = rescale(img, *cfg.target_size)
    if cfg.grayscale_output:
        out = to_grayscale(out)
    return out


def augment_dataset(manifest: DatasetManifest, cfg: AugmentConfig,
                    out_dir: str | Path) -> DatasetManifest:
    """Expand the TRAIN split into ``out_dir`` and return the new manifest.

    Every input record is re-emitted as ``<stem>.ppm`` at the target size
    (grayscale if configured); each TRAIN record additionally gets
    ``copies_per_image`` files ``<stem>_aug<k>.ppm``. Output record paths
    are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    if cfg.copies_per_image > 0 and not manifest.split(Split.TRAIN):
        raise ValueError("TRAIN split is empty")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    stems: dict[str, str] = {}
    records: list[Record] = []
    for rec in manifest.records:
        stem = Path(rec.path).stem
        if stem in stems:
            raise ValueError(f"output name clash: {rec.path!r} and {stems[stem]!r} share stem {stem!r}")
        stems[stem] = rec.path
        try:
            img = decode_image(manifest.resolve(rec))
        except ImageFormatError as exc:
            raise ImageFormatError(f"{rec.path}: {exc}") from exc

        name = f"{stem}.ppm"
        encode_image(_finish(img, cfg), out_dir / name)
        records.append(Record(name, rec.label, rec.split))
        if rec.split is not Split.TRAIN:
            continue
        rng = record_rng(cfg.seed, rec.path)
        for k in range(cfg.copies_per_image):
            spec = sample_spec(rng, cfg)
            name = f"{stem}_aug{k}.ppm"
            encode_image(_finish(apply_transform(img, spec), cfg), out_dir / name)
            records.append(Record(name, rec.label, rec.split))
    return DatasetManifest(records, root=out_dir)
