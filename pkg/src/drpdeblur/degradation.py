"""Blur kernel generation, kernel-parameter bias and blur/noise synthesis.

Kernels are plain 2-D float64 arrays with odd sides, nonnegative entries and
unit sum; :func:`check_kernel` enforces this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal_ops import conv2d_circular_fft

__all__ = [
    "FAMILIES",
    "SWEEP_PARAM",
    "KernelSpec",
    "DegradationConfig",
    "check_kernel",
    "make_motion_kernel",
    "make_gaussian_kernel",
    "make_disk_kernel",
    "realize",
    "expand_bias",
    "pad_kernel",
    "simulate_blur",
    "true_residual",
]

FAMILIES = {
    "motion": ("length", "angle"),
    "gaussian": ("size", "sigma"),
    "disk": ("radius",),
}

# parameter that a scalar bias (and a robustness sweep) perturbs
SWEEP_PARAM = {"motion": "angle", "gaussian": "sigma", "disk": "radius"}


def check_kernel(k: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sides, got shape {k.shape}")
    if not np.isfinite(k).all() or (k < 0).any():
        raise ValueError("kernel weights must be finite and nonnegative")
    if abs(k.sum() - 1.0) > tol:
        raise ValueError(f"kernel sums to {k.sum()!r}, expected 1")
    return k


def _odd_at_least(x: float) -> int:
    n = math.ceil(x - 1e-12)
    return n if n % 2 == 1 else n + 1


def make_motion_kernel(length: float, angle_degrees: float) -> np.ndarray:
    """Linear motion PSF rasterized by bilinear splatting of dense segment samples.

    The segment is centred on the kernel centre and spans ``length - 1`` pixels,
    so ``length`` pixels are covered along an axis-aligned direction. Angles are
    counter-clockwise from the +x axis with rows growing downward.
    """
    if length < 1:
        raise ValueError(f"motion length must be >= 1, got {length}")
    side = _odd_at_least(length)
    c = side // 2
    theta = math.radians(angle_degrees)
    dx, dy = math.cos(theta), -math.sin(theta)
    # snap so that multiples of 90 degrees stay exactly on the axes
    dx = 0.0 if abs(dx) < 1e-12 else dx
    dy = 0.0 if abs(dy) < 1e-12 else dy
    half = (length - 1) / 2.0
    k = np.zeros((side, side))
    n = max(int(math.ceil(8 * (length - 1))), 0) + 1
    ts = np.linspace(-half, half, n) if n > 1 else np.zeros(1)
    for t in ts:
        x = c + t * dx
        y = c + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                w = wy * wx
                if w > 0:
                    k[yy, xx] += w
    return k / k.sum()


def make_gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Truncated isotropic Gaussian; an even ``size`` is bumped to the next odd."""
    if sigma <= 0:
        raise ValueError(f"gaussian sigma must be positive, got {sigma}")
    side = _odd_at_least(size)
    if side < 3:
        raise ValueError(f"gaussian size must be >= 3, got {size}")
    ax = np.arange(side) - side // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _disk_coverage(radius: float) -> np.ndarray:
    side = _odd_at_least(2 * radius + 1)
    c = side // 2
    sub = (np.arange(4) - 1.5) / 4.0  # 4x4 sub-pixel offsets, symmetric about 0
    ax = np.arange(side) - c
    px = ax[:, None] + sub[None, :]  # (side, 4)
    d2 = px[:, None, :, None] ** 2 + px[None, :, None, :] ** 2
    return (d2 <= radius**2).mean(axis=(2, 3))


def make_disk_kernel(radius: float) -> np.ndarray:
    """Uniform defocus disk with 4x4 sub-pixel anti-aliasing at the rim."""
    if radius <= 0:
        raise ValueError(f"disk radius must be positive, got {radius}")
    k = _disk_coverage(radius)
    if k.sum() == 0:
        raise ValueError(f"disk radius {radius} too small to cover any sub-pixel sample")
    return k / k.sum()


@dataclass
class KernelSpec:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        self.params = tuple(float(p) for p in self.params)
        if len(self.params) != len(FAMILIES[self.family]):
            raise ValueError(f"{self.family} needs parameters {FAMILIES[self.family]}, got {self.params}")

    def biased(self, bias) -> "KernelSpec":
        """Spec with additive ``bias``: a per-parameter tuple, or a scalar applied
        to the family's sweep parameter (motion angle, gaussian sigma, disk radius)."""
        bias = expand_bias(self, bias)
        return KernelSpec(self.family, tuple(p + b for p, b in zip(self.params, bias)))

    def label(self) -> str:
        return f"{self.family}({','.join(f'{p:g}' for p in self.params)})"


def expand_bias(spec: KernelSpec, bias) -> tuple[float, ...]:
    """Per-parameter bias tuple for ``spec`` (see :meth:`KernelSpec.biased`)."""
    if bias is None:
        return (0.0,) * len(spec.params)
    if np.ndim(bias) == 0:
        names = FAMILIES[spec.family]
        bias = tuple(float(bias) if n == SWEEP_PARAM[spec.family] else 0.0 for n in names)
    bias = tuple(float(b) for b in bias)
    if len(bias) != len(spec.params):
        raise ValueError(f"bias {bias} does not match {spec.family} parameters {FAMILIES[spec.family]}")
    return bias


def realize(spec: KernelSpec, bias=None) -> np.ndarray:
    """Kernel for ``spec`` with additive per-parameter ``bias`` (None or 0 = exact)."""
    family = spec.family
    params = spec.biased(bias).params
    if family == "motion":
        return make_motion_kernel(*params)
    if family == "gaussian":
        return make_gaussian_kernel(*params)
    return make_disk_kernel(*params)


@dataclass
class DegradationConfig:
    kernel_true: KernelSpec
    kernel_bias: tuple[float, ...] = ()
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        self.kernel_bias = expand_bias(self.kernel_true, self.kernel_bias or None)

    def kernels(self) -> tuple[np.ndarray, np.ndarray]:
        return realize(self.kernel_true), realize(self.kernel_true, self.kernel_bias)


def simulate_blur(x: np.ndarray, k: np.ndarray, noise_sigma: float, seed: int) -> np.ndarray:
    """y = k (*) x + n with n ~ N(0, noise_sigma^2) drawn from a private seeded RNG."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    y = conv2d_circular_fft(x, k)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        y = y + noise_sigma * rng.standard_normal(y.shape)
    return y


def pad_kernel(k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad an odd kernel to a larger odd ``shape`` keeping the centre aligned."""
    kh, kw = k.shape
    h, w = shape
    if h < kh or w < kw or (h - kh) % 2 or (w - kw) % 2:
        raise ValueError(f"cannot centre-pad {k.shape} to {shape}")
    dh, dw = (h - kh) // 2, (w - kw) // 2
    return np.pad(k, ((dh, dh), (dw, dw)))


def true_residual(x: np.ndarray, k_true: np.ndarray, k_hat: np.ndarray) -> np.ndarray:
    """r = (k_true - k_hat) (*) x, with both kernels padded to a common odd size."""
    shape = (max(k_true.shape[0], k_hat.shape[0]), max(k_true.shape[1], k_hat.shape[1]))
    dk = pad_kernel(k_true, shape) - pad_kernel(k_hat, shape)
    return conv2d_circular_fft(x, dk)
