"""Procedural 10-class shape dataset used as the desk-scale reference task.

The class is the shape; position, size, rotation-free jitter, foreground and
background colours and pixel noise are random, so colour statistics alone
do not identify the class.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset

CLASSES = (
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "hbars",
    "vbars",
    "diagonal",
    "checker",
    "dots",
)


def _mask(kind: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float, phase: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    name = CLASSES[kind]
    if name == "disk":
        return dy**2 + dx**2 <= r**2
    if name == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if name == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if name == "cross":
        w = 0.3 * r
        return inside & ((np.abs(dy) <= w) | (np.abs(dx) <= w))
    if name == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    period = max(r / 2, 2.0)
    if name == "hbars":
        return inside & (np.mod(dy + phase, period) < period / 2)
    if name == "vbars":
        return inside & (np.mod(dx + phase, period) < period / 2)
    if name == "diagonal":
        return inside & (np.mod(dy + dx + phase, period * 1.4) < period * 0.7)
    if name == "checker":
        return inside & ((np.floor((dy + r) / period) + np.floor((dx + r) / period)) % 2 == 0)
    # dots
    return inside & (np.mod(dy + phase, period) < period / 2) & (np.mod(dx + phase, period) < period / 2)


def make_shapes(n: int, seed: int = 0, size: int = 32, noise: float = 0.08) -> Dataset:
    """``n`` images with balanced labels (class ``i % 10`` before shuffling)."""
    rng = np.random.default_rng([seed, 11])
    labels = np.arange(n) % len(CLASSES)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), np.float32)
    for i, kind in enumerate(labels):
        r = rng.uniform(0.22, 0.4) * size
        cy, cx = rng.uniform(r * 0.8, size - r * 0.8, size=2)
        fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        # keep foreground and background distinguishable
        while np.abs(fg - bg).sum() < 0.6:
            fg = rng.uniform(0, 1, 3)
        m = _mask(int(kind), yy, xx, cy, cx, r, rng.uniform(0, 8))
        img = np.where(m[None], fg[:, None, None], bg[:, None, None])
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = img
    return Dataset(images, labels.astype(np.uint16), len(CLASSES))
