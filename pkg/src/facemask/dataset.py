"""Dataset manifests and raster image I/O (binary PPM/PGM, PNG read)."""

from __future__ import annotations

import csv
import enum
import io
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_HEADER = ("path", "label", "split")

# Upper bound on width*height*channels accepted by the decoder.
MAX_SAMPLES = 1 << 28


class Label(enum.Enum):
    MASK = "mask"
    NO_MASK = "no_mask"

    @property
    def index(self) -> int:
        return 0 if self is Label.MASK else 1

    @classmethod
    def from_index(cls, i: int) -> "Label":
        return cls.MASK if int(i) == 0 else cls.NO_MASK

    def onehot(self) -> np.ndarray:
        vec = np.zeros(2, dtype=np.float32)
        vec[self.index] = 1.0
        return vec


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label: Label
    split: Split


@dataclass
class DatasetManifest:
    """Ordered (path, label, split) records.

    Relative record paths are resolved against ``root``, which is the
    directory holding the manifest file when loaded from disk.
    """

    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise ManifestError(f"duplicate image path {rec.path!r}")
            seen.add(rec.path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def split(self, which: Split) -> list[Record]:
        return [r for r in self.records if r.split is which]

    def counts(self) -> tuple[int, int]:
        """(TRAIN count, TEST count)."""
        n_train = sum(1 for r in self.records if r.split is Split.TRAIN)
        return n_train, len(self.records) - n_train

    def resolve(self, record: Record | str) -> Path:
        p = Path(record.path if isinstance(record, Record) else record)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    records: list[Record] = []
    seen: dict[str, int] = {}
    reader = csv.reader(io.StringIO(text, newline=""))
    for row in reader:
        lineno = reader.line_num
        if lineno == 1:
            if tuple(c.strip() for c in row) != MANIFEST_HEADER:
                raise ManifestError(f"expected header {','.join(MANIFEST_HEADER)}", lineno)
            continue
        if not row:
            continue
        if len(row) != 3:
            raise ManifestError(f"expected 3 columns, got {len(row)}", lineno)
        img_path, label, split = (c.strip() for c in row)
        try:
            label_v = Label(label)
        except ValueError:
            raise ManifestError(f"unknown label {label!r}", lineno) from None
        try:
            split_v = Split(split)
        except ValueError:
            raise ManifestError(f"unknown split {split!r}", lineno) from None
        if img_path in seen:
            raise ManifestError(f"duplicate path {img_path!r} (first on line {seen[img_path]})", lineno)
        seen[img_path] = lineno
        records.append(Record(img_path, label_v, split_v))
    if not seen and not text.strip():
        raise ManifestError("empty manifest (missing header)", 1)
    return DatasetManifest(records, root=path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest.records:
            writer.writerow((rec.path, rec.label.value, rec.split.value))


class ImageBuffer:
    """H x W x C raster of 8-bit samples, C in {1, 3} (RGB order)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValueError(f"expected H x W x {{1,3}} array, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {pixels.dtype}")
        self.pixels = pixels

    @classmethod
    def from_bytes(cls, width: int, height: int, channels: int, data: bytes) -> "ImageBuffer":
        if len(data) != width * height * channels:
            raise ValueError(
                f"data length {len(data)} != {width}*{height}*{channels}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
        return cls(arr.copy())

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def data(self) -> bytes:
        return np.ascontiguousarray(self.pixels).tobytes()

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height}x{self.channels})"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        elif chr(c).isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not chr(buf[pos]).isspace() and buf[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PNM header")
    return buf[start:pos], pos


def _decode_pnm(buf: bytes, keep_gray: bool) -> ImageBuffer:
    magic = buf[:2]
    channels = {b"P6": 3, b"P5": 1}[magic]
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad PNM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM supported (maxval {maxval})")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    size = width * height * channels
    if size > MAX_SAMPLES:
        raise ImageFormatError(f"dimensions {width}x{height} too large")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or not chr(buf[pos]).isspace():
        raise ImageFormatError("truncated PNM header")
    pos += 1
    payload = buf[pos:pos + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: expected {size} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if channels == 1 and not keep_gray:
        arr = np.repeat(arr, 3, axis=2)
    return ImageBuffer(arr.copy())


def _decode_png(buf: bytes) -> ImageBuffer:
    from PIL import Image

    with Image.open(io.BytesIO(buf)) as im:
        if im.width * im.height * 3 > MAX_SAMPLES:
            raise ImageFormatError(f"dimensions {im.width}x{im.height} too large")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageBuffer(arr.copy())


def decode_image(path: str | Path, keep_gray: bool = False) -> ImageBuffer:
    """Read a P6/P5 PNM or PNG file.

    Grayscale sources are replicated to 3 channels unless ``keep_gray`` is
    set, in which case a P5 file decodes to a 1-channel buffer.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if buf[:2] in (b"P6", b"P5"):
        try:
            return _decode_pnm(buf, keep_gray)
        except ImageFormatError as exc:
            raise ImageFormatError(f"{path}: {exc}") from None
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(buf)
    raise ImageFormatError(f"{path}: unsupported image format")


def encode_image(img: ImageBuffer, path: str | Path) -> None:
    """Write ``img`` as binary PPM (3 channels) or PGM (1 channel)."""
    if img.width == 0 or img.height == 0:
        raise ValueError("cannot encode an empty image")
    magic = b"P6" if img.channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.data)
