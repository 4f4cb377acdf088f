"""Face-crop classification and box/confidence overlay rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import TARGET_SIZE, rescale, to_grayscale
from .backbone import Backbone
from .dataset import ImageBuffer, Label
from .nnhead import HeadParameters, head_forward

MASK_COLOR = (0, 255, 0)
NO_MASK_COLOR = (255, 0, 0)
LINE_WIDTH = 3
FONT_SCALE = 2

# 5x7 glyphs, one string per row, '#' = ink.
GLYPHS = {
    "0": (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    "1": ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "2": (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    "3": ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    "4": ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    "5": ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    "6": ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    "7": ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    "8": (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    "9": (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
    "%": ("##   ", "##  #", "   # ", "  #  ", " #   ", "#  ##", "   ##"),
}
GLYPH_W, GLYPH_H = 5, 7
_BITMAPS = {ch: np.array([[c == "#" for c in row] for row in rows]) for ch, rows in GLYPHS.items()}


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box width and height must be >= 1, got {self.w}x{self.h}")

    def clamp(self, width: int, height: int) -> "FaceBox":
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {self} lies entirely outside the {width}x{height} image")
        return FaceBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Detection:
    box: FaceBox
    label: Label
    confidence: float

    def to_dict(self) -> dict:
        b = self.box
        return {"box": [b.x, b.y, b.w, b.h], "label": self.label.value, "confidence": self.confidence}


def read_boxes(path: str | Path) -> dict[str, list[FaceBox]]:
    out: dict[str, list[FaceBox]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image = obj["image"]
                boxes = [FaceBox(*(int(v) for v in b)) for b in obj["boxes"]]
                if not isinstance(image, str):
                    raise ValueError("\"image\" must be a string")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if image in out:
                raise ValueError(f"{path}: line {lineno}: duplicate image {image!r}")
            out[image] = boxes
    return out


def crop(img: ImageBuffer, box: FaceBox) -> ImageBuffer:
    b = box.clamp(img.width, img.height)
    return ImageBuffer(img.pixels[b.y:b.y + b.h, b.x:b.x + b.w].copy())


def classify_crops(img: ImageBuffer, boxes: list[FaceBox], backbone: Backbone,
                   params: HeadParameters, grayscale: bool = False,
                   image_key: str | None = None) -> list[Detection]:
    """Classify each box of ``img``.

    Crops are clamped to the image, resized to 224x224 and optionally
    grayscaled to match the training preprocessing. With an embedding
    backbone, crop features are looked up as ``"<image_key>#<index>"``.
    """
    if not boxes:
        raise ValueError("no boxes to classify")
    maps = []
    clamped = []
    for i, box in enumerate(boxes):
        b = box.clamp(img.width, img.height)
        clamped.append(b)
        patch = rescale(crop(img, b), *TARGET_SIZE)
        if grayscale and patch.channels == 3:
            patch = to_grayscale(patch)
        key = None if image_key is None else f"{image_key}#{i}"
        maps.append(backbone.features(patch, key).values)
    probs = head_forward(np.stack(maps), params, train=False).probs
    return [
        Detection(b, Label.from_index(int(p.argmax())), float(p.max()))
        for b, p in zip(clamped, probs)
    ]


def _fill(px: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    h, w = px.shape[:2]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x0 < x1 and y0 < y1:
        px[y0:y1, x0:x1] = color


def draw_text(px: np.ndarray, text: str, x: int, y: int, color, scale: int = FONT_SCALE) -> None:
    """Stamp ``text`` with its top-left at (x, y), clipping at the image edge."""
    h, w = px.shape[:2]
    for k, ch in enumerate(text):
        bitmap = np.kron(_BITMAPS[ch], np.ones((scale, scale), dtype=bool))
        gx = x + k * (GLYPH_W + 1) * scale
        ys, xs = np.nonzero(bitmap)
        ys, xs = ys + y, xs + gx
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        px[ys[keep], xs[keep]] = color


def confidence_text(conf: float) -> str:
    return f"{int(round(100 * conf))}%"


def render_overlay(img: ImageBuffer, dets: list[Detection]) -> ImageBuffer:
    """Draw each detection's box and confidence in painter's order on a copy."""
    if img.channels != 3:
        raise ValueError("overlay rendering needs a 3-channel image")
    px = img.pixels.copy()
    text_h = GLYPH_H * FONT_SCALE
    for det in dets:
        b = det.box.clamp(img.width, img.height)
        color = MASK_COLOR if det.label is Label.MASK else NO_MASK_COLOR
        x0, y0, x1, y1 = b.x, b.y, b.x + b.w, b.y + b.h
        t = LINE_WIDTH
        _fill(px, x0, y0, x1, y0 + t, color)
        _fill(px, x0, y1 - t, x1, y1, color)
        _fill(px, x0, y0, x0 + t, y1, color)
        _fill(px, x1 - t, y0, x1, y1, color)
        ty = y0 - text_h - 2
        if ty < 0:
            # no room above the box: place the label just inside it
            ty = y0 + t + 1
        draw_text(px, confidence_text(det.confidence), x0, ty, color)
    return ImageBuffer(px)
