"""Command-line entry point: ``drpdeblur {deblur,simulate,sweep,ablate,metrics}``.

Exit codes: 0 success, 1 usage error (bad flags, bad config file), 2 runtime
failure (unreadable input, incompatible sizes, solver divergence).

Every command accepts ``--config FILE``: a flat ``key = value`` text file
whose keys are the long flag names (``lambda1``, ``iters``, ``lr-image``...).
Flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .degradation import FAMILIES, KernelSpec, expand_bias, realize, simulate_blur, true_residual
from .experiments import (
    DEFAULT_ANCHORS,
    PRESETS,
    SweepSpec,
    ablate,
    deblur_image,
    resolve_image,
    solver_config,
    sweep,
)
from .io import load_image, load_kernel, residual_to_display, save_image, save_kernel
from .signal_ops import mse, psnr, ssim
from .solver import ABLATIONS, DivergenceError, write_trace_csv
from .synthetic import SYNTHETIC_IMAGES

log = logging.getLogger("drpdeblur")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit status 1 for usage errors (argparse's default is 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in str(text).replace(" ", "").split(",") if t)


# ---------------------------------------------------------------- config files


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = read_config_file(known.config)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key!r}: {raw!r}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"bad value for {key!r}: {raw!r} (choose from {list(action.choices)})")
        defaults[key] = value
        action.required = False  # supplied by the file
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------- shared options


def _add_solver_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--preset", choices=sorted(PRESETS), default="paper", help="regularizer preset (default: paper)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--iters", type=int, help="outer iterations T (default 1500)")
    g.add_argument("--lambda1", type=float, help="TV weight")
    g.add_argument("--lambda2", type=float, help="residual L1 weight")
    g.add_argument("--lambda3", type=float, help="DCT artifact L1 weight")
    g.add_argument("--lr-image", type=float)
    g.add_argument("--lr-residual", type=float)
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--net-channels", type=_ints, help="encoder channels per level for both networks, e.g. 16,32,64,128")
    g.add_argument("--skip-channels", type=int, help="skip-branch channels at every level")
    g.add_argument("--input-channels", type=int, help="channels of the fixed noise input")
    g.add_argument("--config", help="flat key = value file with defaults for these flags")


def _solver_config(args, **extra):
    over = {}
    for flag, key in (
        ("iters", "iterations"),
        ("lambda1", "lambda1"),
        ("lambda2", "lambda2"),
        ("lambda3", "lambda3"),
        ("lr_image", "lr_image"),
        ("lr_residual", "lr_residual"),
        ("dtype", "dtype"),
    ):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    net = {}
    if getattr(args, "net_channels", None):
        net["depth"] = len(args.net_channels)
        net["encoder_channels"] = args.net_channels
    if getattr(args, "skip_channels", None) is not None or "depth" in net:
        depth = net.get("depth", 4)
        skip = args.skip_channels if args.skip_channels is not None else 4
        net["skip_channels"] = (skip,) * depth
    if getattr(args, "input_channels", None) is not None:
        net["input_channels"] = args.input_channels
    if net:
        over["image_net"] = dict(net)
        over["residual_net"] = dict(net)
    try:
        return solver_config(args.preset, seed=args.seed, **over, **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _echo_args(args) -> dict:
    skip = {"func", "config", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip or v is None:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _write_config_echo(args, path: Path) -> None:
    """Flat key = value file that reproduces this invocation via --config."""
    lines = []
    for k, v in _echo_args(args).items():
        if k in ("command", "out"):
            continue
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k.replace('_', '-')} = {v}")
    path.write_text("\n".join(lines) + "\n")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_deblur(args) -> int:
    config = _solver_config(args, ablation=args.ablation)
    if args.true_kernel and not args.truth:
        raise UsageError("--true-kernel needs --truth (the residual is computed from the clean image)")
    y = load_image(args.blurry)
    k_hat = load_kernel(args.kernel)
    truth = load_image(args.truth) if args.truth else None
    if truth is not None and truth.shape != y.shape:
        raise ValueError(f"--truth shape {truth.shape} does not match --blurry shape {y.shape}")
    k_true = load_kernel(args.true_kernel) if args.true_kernel else None

    res, record = deblur_image(y, k_hat, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(np.clip(res.x_hat, 0, 1), out / "x_hat.png")
    r_disp, r_scale = residual_to_display(res.r_hat)
    save_image(r_disp, out / "r_hat.png")
    h_disp, h_scale = residual_to_display(res.h_hat)
    save_image(h_disp, out / "h_hat.png")
    artifacts = {"x_hat": "x_hat.png", "r_hat": "r_hat.png", "h_hat": "h_hat.png", "config": "config.txt"}
    if args.trace:
        write_trace_csv(res.loss_trace, out / "trace.csv")
        artifacts["trace"] = "trace.csv"
    _write_config_echo(args, out / "config.txt")

    metrics = {"psnr": None, "ssim": None, "mse_residual": None, "mse_residual_zero": None}
    if truth is not None:
        metrics["psnr"] = psnr(truth, res.x_hat)
        metrics["ssim"] = ssim(truth, res.x_hat)
        print(f"PSNR {metrics['psnr']:.4f} dB  SSIM {metrics['ssim']:.4f}")
    if k_true is not None:
        r_true = true_residual(truth, k_true, k_hat)
        metrics["mse_residual"] = mse(r_true, res.r_hat, clip=False)
        metrics["mse_residual_zero"] = mse(r_true, np.zeros_like(r_true), clip=False)
        print(f"residual MSE {metrics['mse_residual']:.6g} (zero baseline {metrics['mse_residual_zero']:.6g})")

    report = {
        "command": "deblur",
        "arguments": _echo_args(args),
        "solver_config": res.config,
        "metrics": metrics,
        "residual_display": {"map": "[-m, m] -> [0, 1]", "m_r_hat": r_scale, "m_h_hat": h_scale},
        "padding_crop": list(record),
        "iterations_run": len(res.loss_trace),
        "final_loss": res.loss_trace[-1] if res.loss_trace else None,
        "artifacts": artifacts,
        "wall_seconds": res.wall_seconds,
    }
    _write_json(report, out / "report.json")
    return 0


def _resolve_kernel_spec(family: str, params) -> KernelSpec:
    try:
        return KernelSpec(family, tuple(params) if params else DEFAULT_ANCHORS[family])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate(args) -> int:
    if bool(args.clean) == bool(args.synthetic):
        raise UsageError("give exactly one of --clean PATH or --synthetic NAME")
    spec = _resolve_kernel_spec(args.family, args.params)
    bias = args.bias if len(args.bias) != 1 else args.bias[0]
    try:
        k_true = realize(spec)
        k_hat = realize(spec, bias)
    except ValueError as exc:
        raise UsageError(f"invalid kernel parameters: {exc}") from exc
    clean = load_image(args.clean) if args.clean else resolve_image(args.synthetic, args.size)
    y = simulate_blur(clean, k_true, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(clean, out / "clean.png")
    save_image(y, out / "blurry.png")
    save_kernel(k_true, out / "kernel_true.txt")
    save_kernel(k_hat, out / "kernel_hat.txt")
    r_disp, r_scale = residual_to_display(true_residual(clean, k_true, k_hat))
    save_image(r_disp, out / "residual_true.png")
    manifest = {
        "command": "simulate",
        "source": args.clean or f"synthetic:{args.synthetic}:{args.size}",
        "family": spec.family,
        "params": dict(zip(FAMILIES[spec.family], spec.params)),
        "bias": dict(zip(FAMILIES[spec.family], expand_bias(spec, bias))),
        "kernel_true_shape": list(k_true.shape),
        "kernel_hat_shape": list(k_hat.shape),
        "noise_sigma": args.noise,
        "seed": args.seed,
        "residual_display": {"map": "[-m, m] -> [0, 1]", "m": r_scale},
        "files": ["clean.png", "blurry.png", "kernel_true.txt", "kernel_hat.txt", "residual_true.png"],
    }
    _write_json(manifest, out / "manifest.json")
    return 0


def _families(args) -> tuple[str, ...]:
    fams = args.family or tuple(DEFAULT_ANCHORS)
    for f in fams:
        if f not in FAMILIES:
            raise UsageError(f"unknown family {f!r}")
    if (args.params or args.bias_grid) and len(fams) != 1:
        raise UsageError("--params / --bias-grid need exactly one --family")
    return fams


def _images(args) -> tuple[str, ...]:
    images = args.images or ("shapes",)
    for im in images:
        if im not in SYNTHETIC_IMAGES and not Path(im).exists():
            raise ValueError(f"image {im!r} is neither a synthetic name {sorted(SYNTHETIC_IMAGES)} nor a file")
    return images


def cmd_sweep(args) -> int:
    config = _solver_config(args)
    families = _families(args)
    images = _images(args)
    try:
        specs = [
            SweepSpec(
                family=f,
                params=args.params or (),
                bias_grid=args.bias_grid or (),
                images=images,
                seeds=args.seeds,
                size=args.size,
                noise_sigma=args.noise,
                config=config,
            )
            for f in families
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = sweep(specs, args.out, workers=args.workers, timing=args.timing)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed; wrote {Path(args.out) / 'sweep.csv'}")
    return 0


def cmd_ablate(args) -> int:
    config = _solver_config(args)
    spec = _resolve_kernel_spec(args.family, args.params)
    bias = args.bias if len(args.bias) != 1 else args.bias[0]
    modes = args.modes or ABLATIONS
    for m in modes:
        if m not in ABLATIONS:
            raise UsageError(f"unknown ablation mode {m!r}")
    summary = ablate(
        args.out,
        spec,
        bias,
        images=_images(args),
        seeds=args.seeds,
        size=args.size,
        noise_sigma=args.noise,
        config=config,
        modes=modes,
        workers=args.workers,
        timing=args.timing,
    )
    for mode, s in summary.items():
        p = "failed" if s["psnr_mean"] is None else f"{s['psnr_mean']:.3f}"
        print(f"{mode:15s} {p}")
    return 0


def cmd_metrics(args) -> int:
    ref = load_image(args.reference)
    est = load_image(args.estimate)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    out = {"psnr": psnr(ref, est), "ssim": ssim(ref, est), "mse": mse(ref, est)}
    print(json.dumps(out, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drpdeblur", description="Semi-blind deblurring with untrained image and residual priors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("deblur", help="deblur one image with an inaccurate kernel")
    p.add_argument("--blurry", required=True)
    p.add_argument("--kernel", required=True, help="inaccurate kernel k_hat (text format)")
    p.add_argument("--truth", help="clean image for PSNR/SSIM")
    p.add_argument("--true-kernel", help="true kernel, for the residual MSE (needs --truth)")
    p.add_argument("--out", default="out")
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--trace", action="store_true", help="write the per-iteration loss CSV")
    _add_solver_options(p)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("simulate", help="blur a clean image with true and biased kernels")
    p.add_argument("--clean", help="clean image file")
    p.add_argument("--synthetic", choices=sorted(SYNTHETIC_IMAGES), help="use a built-in synthetic image")
    p.add_argument("--size", type=int, default=128, help="synthetic image size")
    p.add_argument("--family", choices=sorted(FAMILIES), required=True)
    p.add_argument("--params", type=_floats, help="kernel parameters, e.g. 20,10 (default: family anchor)")
    p.add_argument("--bias", type=_floats, default=(0.0,), help="per-parameter bias, or one value for the sweep parameter")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sim")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    for name, helptext in (("sweep", "kernel-bias robustness sweep"), ("ablate", "run every ablation mode")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--images", type=_words, help="synthetic names or image files, comma separated")
        p.add_argument("--size", type=int, default=128 if name == "sweep" else 64, help="synthetic image size")
        p.add_argument("--seeds", type=_ints, default=(0, 1, 2) if name == "sweep" else (0,))
        p.add_argument("--noise", type=float, default=0.01)
        p.add_argument("--params", type=_floats)
        p.add_argument("--out", default=name)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--timing", action="store_true", help="fill the wall_s column (makes the CSV run-dependent)")
        if name == "sweep":
            p.add_argument("--family", type=_words, help="kernel families (default: motion,gaussian,disk)")
            p.add_argument("--bias-grid", type=_floats, help="bias values for the sweep parameter (must include 0)")
            p.set_defaults(func=cmd_sweep)
        else:
            p.add_argument("--family", choices=sorted(FAMILIES), default="gaussian")
            p.add_argument("--bias", type=_floats, default=(0.5,), help="kernel bias of the scenario")
            p.add_argument("--modes", type=_words, help=f"subset of {','.join(ABLATIONS)}")
            p.set_defaults(func=cmd_ablate, params=None)
        _add_solver_options(p)

    p = sub.add_parser("metrics", help="PSNR / SSIM / MSE between two images")
    p.add_argument("--reference", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-"):
            subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            if argv[0] in subparsers.choices:
                _apply_config_file(subparsers.choices[argv[0]], argv[1:])
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"drpdeblur: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"drpdeblur: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"drpdeblur: solver diverged: {exc} (try a smaller learning rate)", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"drpdeblur: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
