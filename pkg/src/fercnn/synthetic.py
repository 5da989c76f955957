"""Seeded seven-class toy dataset of geometric patterns plus noise.

Each class is a distinct pattern family; position, scale, phase and
contrast are jittered per sample, then Gaussian noise is added.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import ManifestEntry, encode_pgm, write_manifest
from .labels import LABELS, N_CLASSES

PATTERNS = (
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "ring",
    "filled-square",
    "cross",
    "checkerboard",
)


def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
    cy, cx = rng.uniform(0.35, 0.65, 2)
    period = rng.uniform(0.15, 0.3)
    phase = rng.uniform(0, 2 * np.pi)
    if label == 0:
        img = np.sin(2 * np.pi * yy / period + phase) > 0
    elif label == 1:
        img = np.sin(2 * np.pi * xx / period + phase) > 0
    elif label == 2:
        img = np.sin(2 * np.pi * (xx + yy) / (period * 1.4) + phase) > 0
    elif label == 3:
        r = np.hypot(yy - cy, xx - cx)
        radius = rng.uniform(0.2, 0.3)
        img = np.abs(r - radius) < rng.uniform(0.04, 0.07)
    elif label == 4:
        half = rng.uniform(0.15, 0.25)
        img = (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
    elif label == 5:
        arm = rng.uniform(0.05, 0.08)
        img = (np.abs(yy - cy) < arm) | (np.abs(xx - cx) < arm)
    else:
        cell = rng.uniform(0.12, 0.2)
        img = ((np.floor((yy + rng.uniform()) / cell) + np.floor((xx + rng.uniform()) / cell)) % 2) == 0
    return img.astype(float)


def make_sample(label: int, rng: np.random.Generator, size: int = 64, noise: float = 20.0) -> np.ndarray:
    lo = rng.uniform(20, 70)
    hi = rng.uniform(170, 235)
    img = lo + (hi - lo) * _pattern(label, size, rng)
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_arrays(per_class: int, seed: int, size: int = 64, noise: float = 20.0):
    """Return (images uint8 (N, size, size), labels) in class-interleaved order."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(N_CLASSES), per_class)
    images = np.stack([make_sample(int(k), rng, size, noise) for k in labels])
    return images, labels


def write_dataset(
    out_dir: str | os.PathLike,
    per_class: int,
    seed: int,
    size: int = 64,
    noise: float = 20.0,
    manifest_name: str = "manifest.csv",
) -> Path:
    """Write PGM images under ``out_dir/images`` and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, labels = generate_arrays(per_class, seed, size, noise)
    stem = Path(manifest_name).stem
    entries = []
    for i, (img, label) in enumerate(zip(images, labels)):
        rel = f"images/{stem}_{i:05d}_{LABELS[label]}.pgm"
        (out / rel).write_bytes(encode_pgm(img))
        entries.append(ManifestEntry(rel, int(label)))
    manifest = out / manifest_name
    write_manifest(manifest, entries)
    return manifest
