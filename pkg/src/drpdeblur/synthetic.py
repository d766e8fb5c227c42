"""Deterministic synthetic clean images for experiments without external data.

All images are square, float64, in [0, 1] and piecewise smooth with sharp
edges, which is the regime where kernel error produces visible ringing.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SYNTHETIC_IMAGES", "synthetic_image"]


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    return yy, xx


def shapes(n: int) -> np.ndarray:
    """Rectangle, disc, triangle and a bar on a gentle ramp, plus a striped band."""
    yy, xx = _grid(n)
    img = 0.3 + 0.2 * xx
    img[(np.abs(yy - 0.3) < 0.15) & (np.abs(xx - 0.3) < 0.2)] = 0.85
    img[((yy - 0.65) ** 2 + (xx - 0.65) ** 2) < 0.04] = 0.15
    img[(yy > 0.55) & (yy < 0.9) & (xx > 0.1) & (xx < 0.4) & (yy - 0.55 > xx - 0.1)] = 0.6
    img[(np.abs(yy - 0.15) < 0.05) & (xx > 0.6) & (xx < 0.95)] = 0.95
    img += 0.08 * np.sin(2 * np.pi * 6 * xx) * (yy > 0.8)
    return np.clip(img, 0.0, 1.0)


def rings(n: int) -> np.ndarray:
    """Concentric annuli of alternating intensity around an off-centre point."""
    yy, xx = _grid(n)
    rad = np.hypot(yy - 0.45, xx - 0.55)
    img = np.where((rad * 10).astype(int) % 2 == 0, 0.25, 0.75)
    img[rad > 0.42] = 0.5
    return img.astype(np.float64)


def blocks(n: int) -> np.ndarray:
    """A 4x4 mosaic of flat tiles with fixed pseudo-random intensities."""
    levels = np.random.default_rng(12345).uniform(0.1, 0.9, size=(4, 4))
    yy, xx = _grid(n)
    return levels[(yy * 4).astype(int), (xx * 4).astype(int)]


SYNTHETIC_IMAGES = {"shapes": shapes, "rings": rings, "blocks": blocks}


def synthetic_image(name: str, size: int) -> np.ndarray:
    if name not in SYNTHETIC_IMAGES:
        raise ValueError(f"unknown synthetic image {name!r}; choose from {sorted(SYNTHETIC_IMAGES)}")
    if size < 8:
        raise ValueError("synthetic images need size >= 8")
    return SYNTHETIC_IMAGES[name](size)
