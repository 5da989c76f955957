"""Manifest ingestion, image decoding, resizing, splitting and batching."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .labels import N_CLASSES

log = logging.getLogger(__name__)

IMAGE_SIZE = 48
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DataError(ValueError):
    """Unreadable, malformed or insufficient input data."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    label: int

    def __post_init__(self) -> None:
        if not self.image_path:
            raise DataError("manifest entry has an empty path")
        if not 0 <= self.label < N_CLASSES:
            raise DataError(f"label {self.label} outside [0, {N_CLASSES - 1}]")


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.train_fraction < 1:
            raise DataError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class Batch:
    images: np.ndarray  # (B, 48, 48, 1) in [0, 1]
    labels: np.ndarray  # (B,) int64
    indices: np.ndarray  # positions in the source dataset


@dataclass
class ImageDataset:
    """Decoded, resized images kept as uint8 so they can be rescaled per batch."""

    images: np.ndarray  # (N, 48, 48, 1) uint8
    labels: np.ndarray
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)


# -- manifest -----------------------------------------------------------------

def load_manifest(path: str | os.PathLike) -> tuple[list[ManifestEntry], int]:
    """Read a ``path,label`` CSV. Returns the entries and the number of rows
    skipped because their label lies outside the class range."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label"]:
        raise DataError(f"{path}: expected header 'path,label', got {header!r}")
    entries: list[ManifestEntry] = []
    skipped = 0
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2 or not row[0].strip():
            raise DataError(f"{path}: malformed row {rownum}: {row!r}")
        try:
            label = int(row[1])
        except ValueError:
            raise DataError(f"{path}: row {rownum} has non-integer label {row[1]!r}") from None
        if not 0 <= label < N_CLASSES:
            skipped += 1
            continue
        entries.append(ManifestEntry(row[0].strip(), label))
    if skipped:
        log.info("%s: skipped %d rows with labels outside [0, %d]", path, skipped, N_CLASSES - 1)
    return entries, skipped


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for e in entries:
            w.writerow([e.image_path, e.label])


def annotations_to_manifest(
    annotation_dir: str | os.PathLike,
    frame_template: str = "{video}/{frame:05d}.jpg",
) -> tuple[list[ManifestEntry], int]:
    """Convert per-video label files into manifest entries.

    Each ``<video>.txt`` holds one integer label per line, line ``i`` (1-based)
    describing frame ``i``. A non-numeric first line is treated as a header.
    Labels outside the class range are dropped and counted.
    """
    root = Path(annotation_dir)
    if not root.is_dir():
        raise DataError(f"annotation directory {root} does not exist")
    entries: list[ManifestEntry] = []
    dropped = 0
    for txt in sorted(root.glob("*.txt")):
        lines = txt.read_text(encoding="utf-8").splitlines()
        if lines and not _is_int(lines[0]):
            lines = lines[1:]
        for frame, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            if not _is_int(line):
                raise DataError(f"{txt}: frame {frame} has non-integer label {line!r}")
            label = int(line)
            if not 0 <= label < N_CLASSES:
                dropped += 1
                continue
            entries.append(ManifestEntry(frame_template.format(video=txt.stem, frame=frame), label))
    return entries, dropped


def _is_int(s: str) -> bool:
    try:
        int(s.strip())
    except ValueError:
        return False
    return True


# -- decoding -----------------------------------------------------------------

def _netpbm_header(data: bytes, nfields: int) -> tuple[list[int], int]:
    """Parse whitespace/comment separated integer fields after the magic."""
    fields: list[int] = []
    pos = 2
    while len(fields) < nfields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError("corrupt netpbm header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError("corrupt netpbm header")
    return fields, pos + 1


def _decode_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    (width, height, maxval), offset = _netpbm_header(data, 3)
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise DataError(f"unsupported netpbm geometry {width}x{height} maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset) if len(data) - offset >= need else None
    if raw is None:
        raise DataError(f"truncated netpbm data: need {need} bytes, have {len(data) - offset}")
    img = raw.reshape(height, width, channels).astype(np.float64)
    if maxval != 255:
        img *= 255.0 / maxval
    return img


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img
    r, g, b = (img[..., i] for i in range(3))
    return (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b)[..., None]


def decode_grayscale(data: bytes) -> np.ndarray:
    """Decode image bytes to a float64 (H, W, 1) array with values in [0, 255].

    Binary PGM (P5) and PPM (P6) are decoded natively. PNG and JPEG go
    through Pillow when it is installed. Colour input is reduced with the
    0.299/0.587/0.114 luminosity weights.
    """
    if data[:2] in (b"P5", b"P6"):
        return _to_gray(_decode_netpbm(data))
    if data[:8] == b"\x89PNG\r\n\x1a\n" or data[:3] == b"\xff\xd8\xff":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover
            raise DataError("PNG/JPEG decoding requires Pillow") from None
        try:
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                if im.mode in ("L", "I;16", "I", "F"):
                    arr = np.asarray(im.convert("L"), dtype=np.float64)[..., None]
                else:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        except (OSError, SyntaxError) as exc:
            raise DataError(f"corrupt image: {exc}") from exc
        return _to_gray(arr if arr.ndim == 3 else arr[..., None])
    raise DataError(f"unsupported image format (leading bytes {data[:4]!r})")


def encode_pgm(img: np.ndarray) -> bytes:
    """Encode an (H, W) or (H, W, 1) array of 0..255 values as binary PGM."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_grayscale(data)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- resizing -----------------------------------------------------------------

def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of an (H, W, 1) image with half-pixel-centred sampling."""
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"expected an (H, W, C) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h, height)
    x0, x1, fx = _bilinear_axis(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_image_48(path: str | os.PathLike) -> np.ndarray:
    """Decode, convert to grey and resize to 48x48; returns uint8 (48, 48, 1)."""
    img = resize_bilinear(read_image(path))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def load_dataset(
    entries: Sequence[ManifestEntry],
    images_dir: str | os.PathLike = ".",
    threads: int = 1,
) -> ImageDataset:
    if not entries:
        raise DataError("dataset is empty")
    root = Path(images_dir)
    paths = [str(root / e.image_path) for e in entries]
    if threads > 1:
        # map preserves input order regardless of scheduling
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(load_image_48, paths))
    else:
        images = [load_image_48(p) for p in paths]
    return ImageDataset(
        np.stack(images),
        np.array([e.label for e in entries], dtype=np.int64),
        [e.image_path for e in entries],
    )


# -- splitting and batching ---------------------------------------------------

def split(entries: Sequence, config: SplitConfig = SplitConfig()) -> tuple[list, list]:
    """Seeded shuffle, then the first floor(fraction * n) entries go to train."""
    n = len(entries)
    if n < 2:
        raise DataError(f"need at least 2 entries to split, got {n}")
    order = np.random.default_rng(config.seed).permutation(n)
    n_train = math.floor(config.train_fraction * n + 1e-9)
    n_train = min(max(n_train, 1), n - 1)
    return [entries[i] for i in order[:n_train]], [entries[i] for i in order[n_train:]]


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    return images.astype(dtype) / dtype(255.0)


def batch_slices(n: int, batch_size: int, shuffle_seed: int | None, epoch: int) -> list[np.ndarray]:
    """Index arrays for one epoch. A trailing batch of exactly one sample is dropped."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if n == 0:
        raise DataError("dataset is empty")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks[-1]) == 1 and batch_size > 1:
        log.warning("epoch %d: dropping a trailing batch of 1 sample (batchnorm needs >= 2)", epoch)
        chunks.pop()
    return chunks


def batches(
    dataset: ImageDataset,
    batch_size: int,
    shuffle_seed: int | None,
    epoch: int,
    dtype=np.float32,
) -> Iterator[Batch]:
    for idx in batch_slices(len(dataset), batch_size, shuffle_seed, epoch):
        yield Batch(normalize(dataset.images[idx], dtype), dataset.labels[idx], idx)
