"""Minimal raster line plots (axes, ticks, one polyline per series) via Pillow."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

__all__ = ["line_plot"]

COLOURS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14), (23, 190, 207)]


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = np.ceil(lo / step - 1e-9) * step
    return np.arange(start, hi + step * 1e-6, step)


def line_plot(
    series: dict[str, tuple[list[float], list[float]]],
    path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    size: tuple[int, int] = (520, 360),
) -> None:
    """Render ``{label: (xs, ys)}`` as polylines with markers and save as PNG.

    Non-finite y values break the line (the point is skipped).
    """
    width, height = size
    left, right, top, bottom = 64, 16, 28, 48
    img = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()

    xs_all = np.array([x for xs, _ in series.values() for x in xs], dtype=np.float64)
    ys_all = np.array([y for _, ys in series.values() for y in ys], dtype=np.float64)
    ys_all = ys_all[np.isfinite(ys_all)]
    if xs_all.size == 0 or ys_all.size == 0:
        xs_all, ys_all = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad

    def px(x, y):
        u = left + (x - x0) / (x1 - x0) * (width - left - right)
        v = height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom)
        return (round(u, 2), round(v, 2))

    # axes and ticks
    draw.rectangle([left, top, width - right, height - bottom], outline=(0, 0, 0))
    for t in _ticks(x0, x1):
        u, _ = px(t, y0)
        draw.line([(u, height - bottom), (u, height - bottom + 4)], fill=(0, 0, 0))
        draw.text((u - 10, height - bottom + 6), f"{t:g}", fill=(0, 0, 0), font=font)
    for t in _ticks(y0, y1):
        _, v = px(x0, t)
        draw.line([(left - 4, v), (left, v)], fill=(0, 0, 0))
        draw.text((4, v - 5), f"{t:.4g}", fill=(0, 0, 0), font=font)
    if title:
        draw.text((left, 8), title, fill=(0, 0, 0), font=font)
    if xlabel:
        draw.text(((width - left) // 2 + left - 3 * len(xlabel), height - 18), xlabel, fill=(0, 0, 0), font=font)
    if ylabel:
        draw.text((4, top - 20 if top > 20 else 0), ylabel, fill=(0, 0, 0), font=font)

    for i, (label, (xs, ys)) in enumerate(series.items()):
        colour = COLOURS[i % len(COLOURS)]
        pts = [px(x, y) for x, y in sorted(zip(xs, ys)) if np.isfinite(y)]
        if len(pts) > 1:
            draw.line(pts, fill=colour, width=2)
        for u, v in pts:
            draw.ellipse([u - 3, v - 3, u + 3, v + 3], fill=colour)
        draw.text((width - right - 120, top + 6 + 12 * i), label, fill=colour, font=font)

    img.save(path, format="PNG")
