"""Alternating minimization for semi-blind deblurring with a residual prior.

The objective is

    ||y - k_hat (*) x - r - idct2(v)||_F^2
        + lambda1 * TV(x) + lambda2 * ||r||_1 + lambda3 * ||v||_1

where x is produced by the image network, r by the residual network and v
holds DCT coefficients of the artifact layer. Each outer iteration takes one
joint Adam step on both networks (v fixed), then one proximal-gradient step
on v, which is the exact v-minimizer when L == 2.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .networks import build_net, image_net_config, residual_net_config
from .signal_ops import conv2d_circular_fft, dct2, idct2, soft_threshold
from .tensor import AdamState, Tensor

__all__ = [
    "ABLATIONS",
    "LOSS_PARTS",
    "SolverConfig",
    "SolverState",
    "SolverResult",
    "DivergenceError",
    "init_state",
    "objective",
    "objective_value",
    "step_networks",
    "step_v",
    "run",
    "run_ablation",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_r_sparsity", "no_v_sparsity", "no_tv", "no_dip", "no_drp", "no_r_term")
LOSS_PARTS = ("data", "tv", "r_l1", "v_l1", "total")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, part: str, message: str = ""):
        self.iteration = iteration
        self.part = part
        super().__init__(f"non-finite {part} at iteration {iteration}{': ' + message if message else ''}")


@dataclass
class SolverConfig:
    lambda1: float = 5e-2
    lambda2: float = 5e-5
    lambda3: float = 5e-7
    lr_image: float = 9e-3
    lr_residual: float = 5e-4
    iterations: int = 1500
    L: float = 2.0
    seed: int = 0
    ablation: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dtype: str = "float32"
    # exponential moving average of the image output; None reports the last iterate
    ema_decay: float | None = None
    image_net: dict[str, Any] = field(default_factory=dict)
    residual_net: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lr_image < 0 or self.lr_residual < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {self.ablation!r}; choose from {ABLATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def effective(self) -> "SolverConfig":
        """Config with the ablation's regularizer weights zeroed."""
        mode = self.ablation
        if mode == "no_r_sparsity":
            return replace(self, lambda2=0.0)
        if mode == "no_v_sparsity":
            return replace(self, lambda3=0.0)
        if mode == "no_tv":
            return replace(self, lambda1=0.0)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class _FreeImage:
    """Pixel-wise free image, squashed by a sigmoid (replaces the image network)."""

    def __init__(self, shape, dtype):
        self.logits = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [self.logits]

    def forward(self):
        return T.sigmoid(self.logits)


class _FreeResidual:
    """Pixel-wise free residual (replaces the residual network)."""

    def __init__(self, shape, dtype):
        self.values = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [self.values]

    def forward(self):
        return self.values


@dataclass
class SolverState:
    config: SolverConfig
    image_gen: Any
    residual_gen: Any | None
    v: np.ndarray
    adam_image: AdamState
    adam_residual: AdamState | None
    iter: int = 0
    loss_trace: list[dict[str, float]] = field(default_factory=list)
    x_hat: np.ndarray | None = None
    r_hat: np.ndarray | None = None
    x_ema: np.ndarray | None = None
    # generator outputs (with graph) at the current weights, reused by the next network step
    cached: tuple[Tensor, Tensor | None] | None = None


@dataclass
class SolverResult:
    x_hat: np.ndarray
    r_hat: np.ndarray
    h_hat: np.ndarray
    loss_trace: list[dict[str, float]]
    config: dict
    wall_seconds: float = 0.0


def _net_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


def _target_shape(y: np.ndarray) -> tuple[int, int, int]:
    if y.ndim == 2:
        return (1,) + y.shape
    if y.ndim == 3 and y.shape[0] in (1, 3):
        return y.shape
    raise ValueError(f"observation must be HxW or CxHxW with C in (1, 3), got {y.shape}")


def init_state(y: np.ndarray, config: SolverConfig) -> SolverState:
    """Fresh networks, zero v and zero Adam moments for observation ``y``."""
    c, h, w = _target_shape(np.asarray(y))
    dtype = np.dtype(config.dtype)
    image_seed, residual_seed = _net_seeds(config.seed)
    mode = config.ablation

    if mode == "no_dip":
        image_gen = _FreeImage((c, h, w), dtype)
    else:
        icfg = image_net_config(**{**config.image_net, "head": "sigmoid", "output_channels": c, "init_seed": image_seed})
        image_gen = build_net(icfg, h, w, dtype)

    if mode == "no_r_term":
        residual_gen = None
    elif mode == "no_drp":
        residual_gen = _FreeResidual((c, h, w), dtype)
    else:
        rcfg = residual_net_config(
            **{**config.residual_net, "head": "soft_shrinkage", "output_channels": c, "init_seed": residual_seed}
        )
        residual_gen = build_net(rcfg, h, w, dtype)

    adam_kw = dict(beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    return SolverState(
        config=config,
        image_gen=image_gen,
        residual_gen=residual_gen,
        v=np.zeros((c, h, w)),
        adam_image=AdamState.zeros_like(image_gen.parameters(), **adam_kw),
        adam_residual=(AdamState.zeros_like(residual_gen.parameters(), **adam_kw) if residual_gen else None),
    )


def _forward(state: SolverState) -> tuple[Tensor, Tensor | None]:
    x = state.image_gen.forward()
    r = state.residual_gen.forward() if state.residual_gen is not None else None
    return x, r


def objective(
    state: SolverState, y: np.ndarray, k_hat: np.ndarray, outputs: tuple[Tensor, Tensor | None] | None = None
) -> tuple[Tensor, dict[str, float], Tensor, Tensor | None]:
    """Forward both generators and assemble the tracked objective.

    Returns ``(total, parts, x, r)`` where ``parts`` holds the float value of
    each term and ``r`` is None when the residual term is ablated away.
    ``outputs`` may supply an already computed forward pass at the current
    weights.
    """
    cfg = state.config.effective()
    c, h, w = _target_shape(y)
    y3 = np.asarray(y, dtype=np.float64).reshape(c, h, w)
    dtype = np.dtype(cfg.dtype)

    x, r = outputs if outputs is not None else _forward(state)
    if x.shape != (c, h, w) or (r is not None and r.shape != (c, h, w)):
        raise ValueError("generator output shape does not match the observation")

    fixed = (y3 - idct2(state.v)).astype(dtype)
    misfit = T.sub(fixed, T.circular_conv(x, k_hat))
    if r is not None:
        misfit = T.sub(misfit, r)
    data = T.frob_sq(misfit)
    tv = T.add(T.tsum(T.tabs(T.diff_h(x))), T.tsum(T.tabs(T.diff_v(x))))
    total = T.add(data, T.mul(tv, cfg.lambda1))
    r_l1 = 0.0
    if r is not None:
        r_l1_t = T.tsum(T.tabs(r))
        total = T.add(total, T.mul(r_l1_t, cfg.lambda2))
        r_l1 = float(r_l1_t.data)
    v_l1 = float(np.abs(state.v).sum())
    total = T.add(total, cfg.lambda3 * v_l1)
    parts = {
        "data": float(data.data),
        "tv": float(tv.data),
        "r_l1": r_l1,
        "v_l1": v_l1,
        "total": float(total.data),
    }
    return total, parts, x, r


def objective_value(
    y: np.ndarray,
    k_hat: np.ndarray,
    x: np.ndarray,
    r: np.ndarray | None,
    v: np.ndarray,
    config: SolverConfig,
) -> dict[str, float]:
    """Float64 evaluation of every objective term at fixed outputs (no graph)."""
    cfg = config.effective()
    c, h, w = _target_shape(y)
    y3 = np.asarray(y, dtype=np.float64).reshape(c, h, w)
    x = np.asarray(x, dtype=np.float64)
    misfit = y3 - conv2d_circular_fft(x, k_hat) - idct2(v)
    if r is not None:
        misfit = misfit - np.asarray(r, dtype=np.float64)
    data = float(np.sum(misfit**2))
    tv = float(np.abs(np.diff(x, axis=-1)).sum() + np.abs(np.diff(x, axis=-2)).sum())
    r_l1 = float(np.abs(r).sum()) if r is not None else 0.0
    v_l1 = float(np.abs(v).sum())
    total = data + cfg.lambda1 * tv + cfg.lambda2 * r_l1 + cfg.lambda3 * v_l1
    return {"data": data, "tv": tv, "r_l1": r_l1, "v_l1": v_l1, "total": total}


def _check_parts(parts: dict[str, float], iteration: int) -> None:
    for name in LOSS_PARTS:
        if not np.isfinite(parts[name]):
            raise DivergenceError(iteration, name)


def step_networks(state: SolverState, y: np.ndarray, k_hat: np.ndarray) -> SolverState:
    """One backward pass of the objective (v fixed) and one Adam step per network.

    Afterwards the generators are re-evaluated at the updated weights; these
    outputs feed :func:`step_v` and are reused by the next call.
    """
    cfg = state.config
    try:
        total, parts, _, _ = objective(state, y, k_hat, state.cached)
    except T.NonFiniteError as exc:
        raise DivergenceError(state.iter, "forward", str(exc)) from exc
    _check_parts(parts, state.iter)

    img_params = state.image_gen.parameters()
    res_params = state.residual_gen.parameters() if state.residual_gen is not None else []
    try:
        grads = T.backward(total, img_params + res_params)
        T.adam_step(img_params, grads[: len(img_params)], state.adam_image, cfg.lr_image)
        if res_params:
            T.adam_step(res_params, grads[len(img_params) :], state.adam_residual, cfg.lr_residual)
    except T.NonFiniteError as exc:
        raise DivergenceError(state.iter, "gradient", str(exc)) from exc

    try:
        x, r = state.cached = _forward(state)
    except T.NonFiniteError as exc:
        raise DivergenceError(state.iter, "forward", str(exc)) from exc
    state.x_hat = x.data.astype(np.float64)
    state.r_hat = r.data.astype(np.float64) if r is not None else None
    if cfg.ema_decay is not None:
        d = cfg.ema_decay
        state.x_ema = state.x_hat.copy() if state.x_ema is None else d * state.x_ema + (1 - d) * state.x_hat
    state.loss_trace.append(parts)
    return state


def step_v(state: SolverState, y: np.ndarray, k_hat: np.ndarray) -> SolverState:
    """Proximal-gradient update of v at the generator outputs for the current weights."""
    if state.x_hat is None:
        raise ValueError("step_v needs cached outputs; call step_networks first")
    cfg = state.config.effective()
    c, h, w = _target_shape(y)
    target = np.asarray(y, dtype=np.float64).reshape(c, h, w) - conv2d_circular_fft(state.x_hat, k_hat)
    if state.r_hat is not None:
        target = target - state.r_hat
    if cfg.L == 2.0:
        # orthonormal DCT makes the L = 2 step the exact minimizer
        v = soft_threshold(dct2(target), cfg.lambda3 / 2.0)
    else:
        grad = -2.0 * dct2(target - idct2(state.v))
        v = soft_threshold(state.v - grad / cfg.L, cfg.lambda3 / cfg.L)
    if not np.isfinite(v).all():
        raise DivergenceError(state.iter, "v")
    state.v = v
    return state


def _final_outputs(state: SolverState) -> tuple[np.ndarray, np.ndarray]:
    x_t, r_t = state.cached if state.cached is not None else _forward(state)
    x = x_t.data.astype(np.float64)
    r = r_t.data.astype(np.float64) if r_t is not None else np.zeros_like(x)
    if state.x_ema is not None:
        x = state.x_ema
    return x, r


def run(
    y: np.ndarray,
    k_hat: np.ndarray,
    config: SolverConfig | None = None,
    callback=None,
) -> SolverResult:
    """Run ``config.iterations`` outer iterations from a fresh seeded state.

    ``callback(state)`` is invoked after each iteration when given. Outputs
    keep the layout of ``y`` (HxW in, HxW out).
    """
    config = config or SolverConfig()
    y = np.asarray(y, dtype=np.float64)
    if not np.isfinite(y).all():
        raise ValueError("observation contains non-finite values")
    k_hat = np.asarray(k_hat, dtype=np.float64)
    t0 = time.perf_counter()
    state = init_state(y, config)
    for it in range(config.iterations):
        state.iter = it
        step_networks(state, y, k_hat)
        step_v(state, y, k_hat)
        if callback is not None:
            callback(state)
        if it % 250 == 0:
            log.debug("iter %d total %.6g data %.6g", it, state.loss_trace[-1]["total"], state.loss_trace[-1]["data"])
    x, r = _final_outputs(state)
    h_img = idct2(state.v)
    shape = y.shape
    return SolverResult(
        x_hat=x.reshape(shape),
        r_hat=r.reshape(shape),
        h_hat=h_img.reshape(shape),
        loss_trace=state.loss_trace,
        config=config.to_dict(),
        wall_seconds=time.perf_counter() - t0,
    )


def run_ablation(y: np.ndarray, k_hat: np.ndarray, config: SolverConfig, mode: str | None = None) -> SolverResult:
    """Run with ``mode`` (defaults to ``config.ablation``); ``full`` is plain :func:`run`."""
    if mode is not None:
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {mode!r}; choose from {ABLATIONS}")
        config = replace(config, ablation=mode)
    return run(y, k_hat, config)


def write_trace_csv(trace: list[dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter",) + LOSS_PARTS)
        for i, row in enumerate(trace):
            w.writerow([i] + [repr(float(row[k])) for k in LOSS_PARTS])
