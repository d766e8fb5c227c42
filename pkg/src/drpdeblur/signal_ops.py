"""Plain-array signal kernels: periodic convolution, orthonormal DCT, TV,
soft-thresholding and image quality metrics.

Images are H x W or C x H x W float arrays; 2-D operators act on the last two
axes, so colour images are handled channel by channel.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

__all__ = [
    "PSNR_CAP_DB",
    "conv2d_circular_fft",
    "conv2d_direct",
    "conv2d_adjoint",
    "dct2",
    "idct2",
    "tv_value",
    "soft_threshold",
    "mse",
    "psnr",
    "ssim",
]

# returned for identical images (mse == 0) and as an upper clamp otherwise
PSNR_CAP_DB = 99.0


def _check_kernel_fits(image: np.ndarray, kernel: np.ndarray) -> None:
    if kernel.ndim != 2:
        raise ValueError(f"kernel must be 2-D, got shape {kernel.shape}")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel must have odd height and width, got {kernel.shape}")
    if image.ndim not in (2, 3):
        raise ValueError(f"image must be HxW or CxHxW, got shape {image.shape}")
    h, w = image.shape[-2:]
    if kh > h or kw > w:
        raise ValueError(f"kernel {kernel.shape} larger than image {(h, w)}")


def _kernel_otf(kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    kh, kw = kernel.shape
    pad = np.zeros((h, w), dtype=np.float64)
    pad[:kh, :kw] = kernel
    # move the kernel centre to (0, 0)
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


def conv2d_circular_fft(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Periodic 2-D convolution with a centred odd-sized kernel, via FFT."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel_fits(image, kernel)
    if kernel.size == 1:  # pure scaling; keep it exact
        return image * kernel[0, 0]
    h, w = image.shape[-2:]
    otf = _kernel_otf(kernel, h, w)
    return np.fft.irfft2(np.fft.rfft2(image) * otf, s=(h, w))


def conv2d_adjoint(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d_circular_fft` (periodic correlation)."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel_fits(image, kernel)
    if kernel.size == 1:
        return image * kernel[0, 0]
    h, w = image.shape[-2:]
    otf = _kernel_otf(kernel, h, w)
    return np.fft.irfft2(np.fft.rfft2(image) * np.conj(otf), s=(h, w))


def conv2d_direct(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Periodic convolution by explicit summation over kernel taps."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_kernel_fits(image, kernel)
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(image)
    for a in range(kh):
        for b in range(kw):
            if kernel[a, b] != 0.0:
                # out[i, j] += k[a, b] * x[i - (a - ch), j - (b - cw)]
                out += kernel[a, b] * np.roll(image, (a - ch, b - cw), axis=(-2, -1))
    return out


def dct2(image: np.ndarray) -> np.ndarray:
    """Orthonormal separable type-II DCT over the last two axes."""
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise ValueError("dct2: non-finite input")
    return scipy.fft.dctn(image, type=2, norm="ortho", axes=(-2, -1))


def idct2(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2` (its transpose)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if not np.isfinite(coeffs).all():
        raise ValueError("idct2: non-finite input")
    return scipy.fft.idctn(coeffs, type=2, norm="ortho", axes=(-2, -1))


def tv_value(image: np.ndarray) -> float:
    """Anisotropic TV with non-periodic forward differences, summed over channels."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=-1)).sum() + np.abs(np.diff(image, axis=-2)).sum())


def soft_threshold(t: np.ndarray, delta: float) -> np.ndarray:
    """Entrywise max(|t| - delta, 0) * sign(t): the prox of delta * ||.||_1."""
    if delta < 0:
        raise ValueError(f"threshold must be nonnegative, got {delta}")
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(np.abs(t) - delta, 0.0) * np.sign(t)


def _prepare_pair(reference, estimate):
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    return np.clip(ref, 0.0, 1.0), np.clip(est, 0.0, 1.0)


def mse(reference: np.ndarray, estimate: np.ndarray, clip: bool = True) -> float:
    """Mean squared difference. ``clip=False`` skips the [0, 1] clamp (for residuals)."""
    if clip:
        ref, est = _prepare_pair(reference, estimate)
    else:
        ref = np.asarray(reference, dtype=np.float64)
        est = np.asarray(estimate, dtype=np.float64)
        if ref.shape != est.shape:
            raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    return float(np.mean((ref - est) ** 2))


def psnr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """PSNR in dB for peak 1.0, capped at ``PSNR_CAP_DB``."""
    err = mse(reference, estimate)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP_DB))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=-1) @ g


def ssim(
    reference: np.ndarray,
    estimate: np.ndarray,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM over all valid positions of a Gaussian window (dynamic range 1).

    Colour inputs (C x H x W) are averaged over channels.
    """
    ref, est = _prepare_pair(reference, estimate)
    if min(ref.shape[-2:]) < win_size:
        raise ValueError(f"image smaller than the {win_size}x{win_size} SSIM window")
    g = _gaussian_window(win_size, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    mu_x = _filter_valid(ref, g)
    mu_y = _filter_valid(est, g)
    sxx = _filter_valid(ref * ref, g) - mu_x**2
    syy = _filter_valid(est * est, g) - mu_y**2
    sxy = _filter_valid(ref * est, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
