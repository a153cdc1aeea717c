"""Seeded synthetic grayscale test images.

Piecewise-smooth scenes with step edges, gradients, blobs and mild texture:
enough low-dimensional patch structure for a small trained mixture to be a
useful prior, without shipping image assets.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

__all__ = ["phantom_image", "phantom_corpus"]


def phantom_image(H: int, W: int, seed: int = 0) -> np.ndarray:
    """One synthetic image in [0.03, 0.97]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")

    img = 0.5 + 0.25 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += 0.08 * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)

    # sharp half-plane steps at random orientations
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.2, 0.8)
        line = np.cos(theta) * xx + np.sin(theta) * yy - offset
        img += rng.uniform(-0.25, 0.25) * (line > 0)

    # smooth blobs
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        s = rng.uniform(0.05, 0.2)
        img += rng.uniform(-0.3, 0.3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                               / (2 * s * s))

    # band-limited texture patch
    tex = uniform_filter(rng.standard_normal((H, W)), size=3)
    mask = uniform_filter((rng.random((H, W)) < 0.4).astype(float), size=15)
    img += 0.06 * tex * mask

    lo, hi = img.min(), img.max()
    return 0.03 + 0.94 * (img - lo) / (hi - lo)


def phantom_corpus(count: int, H: int, W: int, seed: int = 0) -> list[np.ndarray]:
    return [phantom_image(H, W, seed * 10007 + i) for i in range(count)]
