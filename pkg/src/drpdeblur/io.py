"""Image, kernel and size-padding helpers used by the command-line tools.

Images are float arrays in [0, 1]: H x W for grey, 3 x H x W for colour.
PNG goes through Pillow; binary and ASCII PGM/PPM (8 or 16 bit) are parsed
here so the sample maximum from the header is honoured exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .degradation import check_kernel

__all__ = [
    "load_image",
    "save_image",
    "load_kernel",
    "save_kernel",
    "pad_to_divisible",
    "crop",
    "residual_to_display",
]

KERNEL_SUM_TOL = 1e-6


# ---------------------------------------------------------------- netpbm


def _netpbm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def _read_netpbm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    (_, w, h, maxval), pos = _netpbm_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported sample maximum {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P2", b"P3"):
        samples = np.array(data[pos:].split()[:n], dtype=np.int64)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        samples = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.int64)
    if samples.size != n:
        raise ValueError(f"{path}: expected {n} samples, found {samples.size}")
    img = samples.reshape(h, w, channels).astype(np.float64) / maxval
    return img[..., 0] if channels == 1 else np.moveaxis(img, -1, 0)


def _write_netpbm(q: np.ndarray, path: Path) -> None:
    if q.ndim == 2:
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n"
        body = q.tobytes()
    else:
        header = f"P6\n{q.shape[2]} {q.shape[1]}\n255\n"
        body = np.ascontiguousarray(np.moveaxis(q, 0, -1)).tobytes()
    path.write_bytes(header.encode("ascii") + body)


# ---------------------------------------------------------------- images


def load_image(path) -> np.ndarray:
    """Load PNG/PGM/PPM as floats in [0, 1] (sample / maximum sample)."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return _read_netpbm(path)
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(im, dtype=np.float64) / 65535.0
    if mode == "I":
        # Pillow opens 16-bit greyscale PNGs as 32-bit integer images
        arr = np.asarray(im, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: unsupported integer sample range")
        return arr / 65535.0
    if mode in ("L", "LA"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if mode in ("RGB", "RGBA", "P"):
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return np.moveaxis(rgb, -1, 0)
    raise ValueError(f"{path}: unsupported image mode {mode!r}")


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    """Save an H x W or 3 x H x W image as 8-bit PNG or PGM/PPM (by extension)."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if not (image.ndim == 2 or (image.ndim == 3 and image.shape[0] == 3)):
        raise ValueError(f"cannot save image of shape {image.shape}")
    q = quantize(image)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        _write_netpbm(q, path)
        return
    if suffix != ".png":
        raise ValueError(f"unsupported image extension {suffix!r}")
    im = Image.fromarray(q, "L") if q.ndim == 2 else Image.fromarray(np.ascontiguousarray(np.moveaxis(q, 0, -1)), "RGB")
    im.save(path, format="PNG")


def residual_to_display(r: np.ndarray) -> tuple[np.ndarray, float]:
    """Map a signed residual to [0, 1] via [-m, m] -> [0, 1] with m = max|r|.

    Zero maps to mid-grey. Returns the display image and ``m`` (0 for an
    all-zero residual, which is shown flat grey).
    """
    r = np.asarray(r, dtype=np.float64)
    m = float(np.abs(r).max()) if r.size else 0.0
    if m == 0.0:
        return np.full(r.shape, 0.5), 0.0
    return (r / m + 1.0) / 2.0, m


# ---------------------------------------------------------------- kernels


def save_kernel(kernel: np.ndarray, path) -> None:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2:
        raise ValueError("kernel must be 2-D")
    lines = [f"{k.shape[0]} {k.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in k]
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path) -> np.ndarray:
    """Read the "H W" + rows text format; renormalize if the sum is within 1e-6 of 1."""
    text = Path(path).read_text().split("\n")
    rows = [ln.split() for ln in text if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise ValueError(f"{path}: malformed kernel header")
    try:
        h, w = int(rows[0][0]), int(rows[0][1])
        k = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed kernel file: {exc}") from exc
    if h < 1 or w < 1 or k.shape != (h, w):
        raise ValueError(f"{path}: header says {h}x{w}, body has shape {k.shape}")
    if not np.isfinite(k).all() or (k < 0).any():
        raise ValueError(f"{path}: kernel weights must be finite and nonnegative")
    total = k.sum()
    if abs(total - 1.0) > KERNEL_SUM_TOL:
        raise ValueError(f"{path}: kernel sums to {total!r}, not within {KERNEL_SUM_TOL} of 1")
    return check_kernel(k / total)


# ---------------------------------------------------------------- padding


def pad_to_divisible(image: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Reflect-pad right/bottom so H and W are multiples of ``factor``.

    Returns the padded image and a crop record: ``()`` when nothing was padded,
    otherwise the original ``(H, W)``.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    image = np.asarray(image)
    h, w = image.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph == 0 and pw == 0:
        return image, ()
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, widths, mode="reflect" if min(h, w) > 1 else "edge"), (h, w)


def crop(image: np.ndarray, record: tuple[int, ...]) -> np.ndarray:
    """Undo :func:`pad_to_divisible` given its crop record."""
    if not record:
        return image
    h, w = record
    return image[..., :h, :w]
