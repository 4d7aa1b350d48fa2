"""Procedural colour-image corpus standing in for a natural-image pretraining set.

Each image is a smooth colour gradient background with a handful of
randomly coloured, textured shapes. The class label (used only for the
supervised generic baseline) is the shape type of the largest object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SHAPES = ("ellipse", "rectangle", "triangle", "ring")


@dataclass
class GenericCorpusParams:
    n_images: int = 1000
    size: int = 224
    min_objects: int = 2
    max_objects: int = 6


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle, rng) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    aspect = rng.uniform(0.5, 1.0)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (aspect * r)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= aspect * r)
    if kind == "triangle":
        return (v >= -0.5 * r) & (v <= r - np.sqrt(3.0) * np.abs(u))
    d = np.sqrt(u**2 + v**2)
    return (d <= r) & (d >= 0.55 * r)


def generic_image(seed: int, params: GenericCorpusParams = GenericCorpusParams()) -> tuple[np.ndarray, int]:
    """One ``3 x size x size`` uint8 image and its class label."""
    rng = np.random.default_rng(seed)
    n = params.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    t = (np.cos(rng.uniform(0, np.pi)) * xx + np.sin(rng.uniform(0, np.pi)) * yy) / (1.5 * n)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    largest, label = -1.0, 0
    for _ in range(int(rng.integers(params.min_objects, params.max_objects + 1))):
        k = int(rng.integers(len(SHAPES)))
        r = rng.uniform(0.06, 0.3) * n
        mask = _shape_mask(SHAPES[k], yy, xx, rng.uniform(0, n), rng.uniform(0, n), r, rng.uniform(0, np.pi), rng)
        colour = rng.uniform(0, 1, 3)
        if rng.uniform() < 0.5:
            freq = rng.uniform(0.05, 0.3)
            stripes = 0.5 + 0.5 * np.sin(freq * (xx * np.cos(r) + yy * np.sin(r)))
            fill = colour[:, None, None] * (0.6 + 0.4 * stripes)
        else:
            fill = np.broadcast_to(colour[:, None, None], img.shape)
        img = np.where(mask[None], fill, img)
        area = float(mask.sum())
        if area > largest:
            largest, label = area, k
    img = ndimage.gaussian_filter(img, (0, 0.7, 0.7))
    img += rng.normal(0, 0.02, img.shape)
    return np.round(255 * np.clip(img, 0, 1)).astype(np.uint8), label


def generic_corpus(params: GenericCorpusParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    seeds = np.random.default_rng(seed).integers(0, 2**62, size=params.n_images)
    images = np.empty((params.n_images, 3, params.size, params.size), dtype=np.uint8)
    labels = np.empty(params.n_images, dtype=np.int64)
    for i, s in enumerate(seeds):
        images[i], labels[i] = generic_image(int(s), params)
    return images, labels
