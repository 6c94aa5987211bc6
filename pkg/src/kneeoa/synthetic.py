"""Procedural image corpora for desk-scale training and tests.

* ``shape_corpus``: five geometric shape classes (disk, square, triangle,
  cross, ring) at random position, size, and intensity.
* ``proxy_corpus``: five oriented-texture classes used as the stand-in
  pretraining task.
* ``pseudo_radiograph``: two bright bone-like ellipses separated by a joint
  gap that narrows as the KL grade rises, with marginal osteophyte spurs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .imaging import GrayImage, write_image

SHAPES = ("disk", "square", "triangle", "cross", "ring")

# class proportions of the OAI severity dataset, grades 0..4
TABLE1_TOTALS = (3857, 1770, 2578, 1286, 295)


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return (xx + 0.5) / size, (yy + 0.5) / size


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    xx, yy = _grid(size)
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return (dx ** 2 + dy ** 2 <= r ** 2).astype(float)
    if kind == "square":
        return ((np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)).astype(float)
    if kind == "triangle":
        # apex up, base at v = +h/2
        h = r * 1.8
        return ((v <= h / 2) & (np.abs(u) * 1.7 <= v + h / 2)).astype(float)
    if kind == "cross":
        arm = r * 0.33
        return (((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))).astype(float)
    if kind == "ring":
        d = np.sqrt(dx ** 2 + dy ** 2)
        return ((d <= r) & (d >= r * 0.55)).astype(float)
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, size: int, rng: np.random.Generator, noise: float = 0.05) -> GrayImage:
    r = rng.uniform(0.22, 0.34)
    cx, cy = rng.uniform(r + 0.05, 1 - r - 0.05, size=2)
    angle = rng.uniform(-0.3, 0.3)
    bg = rng.uniform(0.05, 0.3)
    fg = rng.uniform(0.65, 0.95)
    img = bg + (fg - bg) * _shape_mask(kind, size, cx, cy, r, angle)
    img = img + rng.normal(0, noise, img.shape)
    return GrayImage.clipped(img)


def shape_corpus(n_per_class: int, size: int = 32, seed: int = 0) -> tuple[list[GrayImage], np.ndarray]:
    """Balanced five-class shape images, interleaved by class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n_per_class):
        for label, kind in enumerate(SHAPES):
            images.append(render_shape(kind, size, rng))
            labels.append(label)
    return images, np.array(labels)


def render_texture(label: int, size: int, rng: np.random.Generator) -> GrayImage:
    xx, yy = _grid(size)
    freq = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    if label < 4:
        theta = label * np.pi / 4 + rng.uniform(-0.12, 0.12)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    else:
        wave = np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy + phase)
    img = 0.5 + rng.uniform(0.2, 0.4) * wave + rng.normal(0, 0.05, xx.shape)
    return GrayImage.clipped(img)


def proxy_corpus(n_per_class: int, size: int = 32, seed: int = 0) -> tuple[list[GrayImage], np.ndarray]:
    """Five texture classes: gratings at 0/45/90/135 degrees and a checker pattern."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n_per_class):
        for label in range(5):
            images.append(render_texture(label, size, rng))
            labels.append(label)
    return images, np.array(labels)


def pseudo_radiograph(grade: int, size: int, rng: np.random.Generator) -> GrayImage:
    """Knee-like test image whose joint gap narrows with ``grade``.

    Intensities are kept in a narrow band so the raw image is low contrast.
    """
    xx, yy = _grid(size)
    gap = (0.22 - 0.04 * grade) + rng.normal(0, 0.012)
    gap = max(gap, 0.02)
    cy = 0.5 + rng.normal(0, 0.03)
    cx = 0.5 + rng.normal(0, 0.03)
    half_w = rng.uniform(0.36, 0.42)
    femur = ((xx - cx) / half_w) ** 2 + ((yy - (cy - gap / 2 - 0.3)) / 0.3) ** 2 <= 1.0
    tibia = ((xx - cx) / half_w) ** 2 + ((yy - (cy + gap / 2 + 0.3)) / 0.3) ** 2 <= 1.0
    bone = (femur | tibia).astype(float)
    # osteophyte spurs at the joint margins grow with grade
    spur = 0.015 * grade
    for side in (-1, 1):
        sx = cx + side * half_w * 0.95
        bone = np.maximum(bone, (((xx - sx) / (0.02 + spur)) ** 2 + ((yy - cy) / (gap / 2 + 0.01)) ** 2 <= 1.0) * 0.8)
    base = rng.uniform(0.38, 0.45)
    contrast = rng.uniform(0.1, 0.16)
    img = base + contrast * bone + rng.normal(0, 0.015, xx.shape)
    return GrayImage.clipped(img)


def scaled_counts(total: int, proportions=TABLE1_TOTALS) -> dict[int, int]:
    """Per-grade counts summing to ``total`` with the given class proportions."""
    weights = np.asarray(proportions, dtype=float) / sum(proportions)
    raw = weights * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts))[: total - counts.sum()]:
        counts[i] += 1
    return {g: int(c) for g, c in enumerate(counts)}


def write_radiograph_tree(root, counts: Mapping[int, int], size: int = 32, seed: int = 0) -> Path:
    """Write ``root/{grade}/kNNNNN.pgm`` pseudo-radiographs."""
    root = Path(root)
    for grade, n in counts.items():
        gdir = root / str(grade)
        gdir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, grade])
        for i in range(n):
            write_image(gdir / f"k{i:05d}.pgm", pseudo_radiograph(grade, size, rng))
    return root
