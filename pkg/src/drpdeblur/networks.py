"""Untrained encoder-decoder generators used as image and residual priors.

Both networks share one topology (stride-2 encoder, 1x1 skip branches,
bilinear-upsampling decoder) and differ only in the output head: a sigmoid
for the image estimate, a soft-shrinkage for the residual estimate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "NetConfig",
    "Network",
    "sample_noise_input",
    "build_net",
    "image_net_config",
    "residual_net_config",
    "save_checkpoint",
    "load_checkpoint",
]

HEADS = ("sigmoid", "soft_shrinkage", "identity")

# puts the residual net's initial pre-head spread at about twice the default
# shrink threshold: a small, partly sparse starting residual
RESIDUAL_HEAD_SCALE = 0.025


@dataclass
class NetConfig:
    input_channels: int = 16
    output_channels: int = 1
    depth: int = 4
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    skip_channels: tuple[int, ...] = (4, 4, 4, 4)
    activation_slope: float = 0.2
    head: str = "sigmoid"
    shrink_delta: float = 0.01
    upsample: str = "bilinear"
    input_sigma: float = 0.1
    init_scheme: str = "kaiming"
    # multiplier on the final 1x1 conv weights at init; small values start the
    # output near zero (useful for the residual net)
    head_scale: float = 1.0
    norm: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if isinstance(self.skip_channels, int):
            self.skip_channels = (self.skip_channels,) * self.depth
        self.skip_channels = tuple(int(c) for c in self.skip_channels)
        if self.depth < 1:
            raise ValueError("depth must be positive")
        if len(self.encoder_channels) != self.depth or len(self.skip_channels) != self.depth:
            raise ValueError("encoder_channels and skip_channels need one entry per level")
        if min(self.encoder_channels) < 1 or self.input_channels < 1 or self.output_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.skip_channels) < 0:
            raise ValueError("skip channel counts must be >= 0")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.shrink_delta < 0:
            raise ValueError("shrink_delta must be nonnegative")
        if self.input_sigma <= 0:
            raise ValueError("input_sigma must be positive")
        if self.head_scale <= 0:
            raise ValueError("head_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["skip_channels"] = list(self.skip_channels)
        return d


def image_net_config(**overrides) -> NetConfig:
    return NetConfig(**{"head": "sigmoid", **overrides})


def residual_net_config(**overrides) -> NetConfig:
    return NetConfig(**{"head": "soft_shrinkage", "head_scale": RESIDUAL_HEAD_SCALE, **overrides})


def sample_noise_input(channels: int, height: int, width: int, sigma: float, seed, dtype=np.float64) -> Tensor:
    """Fixed i.i.d. N(0, sigma^2) network input, drawn once per run."""
    if sigma <= 0:
        raise ValueError(f"noise sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((channels, height, width)) * sigma
    return Tensor(z.astype(dtype))


@dataclass
class Network:
    config: NetConfig
    height: int
    width: int
    params: dict[str, Tensor] = field(repr=False)
    fixed_input: Tensor = field(repr=False)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def pre_head(self) -> Tensor:
        """Everything up to (not including) the head activation."""
        cfg = self.config
        p = self.params
        slope = cfg.activation_slope

        def conv(x, name, stride=1, pad=1):
            return T.conv2d(x, p[name + ".w"], p.get(name + ".b"), stride=stride, padding=pad)

        def block(x, name, stride=1, pad=1):
            h = conv(x, name, stride, pad)
            if cfg.norm:
                h = T.channel_norm(h, p[name + ".gamma"], p[name + ".beta"])
            return T.leaky_relu(h, slope)

        skips = []
        h = self.fixed_input
        for i in range(cfg.depth):
            skips.append(block(h, f"skip{i}", pad=0) if cfg.skip_channels[i] else None)
            h = block(h, f"enc{i}.down", stride=2)
            h = block(h, f"enc{i}.conv")
        for i in reversed(range(cfg.depth)):
            h = T.upsample2x(h, cfg.upsample)
            if skips[i] is not None:
                h = T.concat([h, skips[i]], axis=0)
            h = block(h, f"dec{i}.conv1")
            h = block(h, f"dec{i}.conv2")
        return conv(h, "head", pad=0)

    def forward(self) -> Tensor:
        a = self.pre_head()
        head = self.config.head
        if head == "sigmoid":
            return T.sigmoid(a)
        if head == "soft_shrinkage":
            return T.soft_shrink(a, self.config.shrink_delta)
        return a


def _init_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, dtype, slope: float, scheme: str):
    fan_in = in_ch * k * k
    if scheme == "kaiming":
        # variance-preserving through leaky-ReLU layers
        bound = np.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
        bias_bound = 0.0
    else:
        bound = bias_bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)
    b = rng.uniform(-bias_bound, bias_bound, size=(out_ch,)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def build_net(config: NetConfig, height: int, width: int, dtype=np.float64) -> Network:
    """Build a generator for an H x W target with fresh seeded parameters and input."""
    factor = 2**config.depth
    if height % factor or width % factor:
        raise ValueError(f"image size {height}x{width} not divisible by 2**depth = {factor}")
    param_seq, input_seq = np.random.SeedSequence(config.init_seed).spawn(2)
    rng = np.random.default_rng(param_seq)

    params: dict[str, Tensor] = {}

    def add(name, out_ch, in_ch, k, norm=config.norm):
        params[name + ".w"], bias = _init_conv(rng, out_ch, in_ch, k, dtype, config.activation_slope, config.init_scheme)
        if not norm:
            params[name + ".b"] = bias
        else:
            # the normalization removes the channel mean, so a conv bias would be inert
            params[name + ".gamma"] = Tensor(np.ones(out_ch, dtype=dtype), requires_grad=True)
            params[name + ".beta"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    ch_in = config.input_channels
    for i, ch in enumerate(config.encoder_channels):
        if config.skip_channels[i]:
            add(f"skip{i}", config.skip_channels[i], ch_in, 1)
        add(f"enc{i}.down", ch, ch_in, 3)
        add(f"enc{i}.conv", ch, ch, 3)
        ch_in = ch
    up_ch = config.encoder_channels[-1]
    for i in reversed(range(config.depth)):
        ch = config.encoder_channels[i]
        add(f"dec{i}.conv1", ch, up_ch + config.skip_channels[i], 3)
        add(f"dec{i}.conv2", ch, ch, 3)
        up_ch = ch
    add("head", config.output_channels, up_ch, 1, norm=False)
    params["head.w"].data *= config.head_scale

    z = sample_noise_input(config.input_channels, height, width, config.input_sigma, input_seq, dtype)
    return Network(config, height, width, params, z)


# checkpoint format: "<stem>.manifest" lists "name dtype offset shape..." per
# line after a header; "<stem>.bin" holds the little-endian arrays back to back.
_MANIFEST_HEADER = "drpdeblur-checkpoint 1"


def save_checkpoint(net: Network, stem) -> None:
    stem = Path(stem)
    lines = [_MANIFEST_HEADER]
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, t in list(net.params.items()) + [("fixed_input", net.fixed_input)]:
            arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())
            lines.append(f"{name} {arr.dtype.str} {offset} " + " ".join(map(str, arr.shape)))
            offset += arr.nbytes
    stem.with_suffix(".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(net: Network, stem) -> None:
    """Overwrite ``net``'s parameters and input from a checkpoint written by save_checkpoint."""
    stem = Path(stem)
    lines = stem.with_suffix(".manifest").read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ValueError("not a drpdeblur checkpoint manifest")
    blob = stem.with_suffix(".bin").read_bytes()
    for line in lines[1:]:
        name, dt, offset, *shape = line.split()
        dtype = np.dtype(dt)
        shape = tuple(int(s) for s in shape)
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=int(offset)).reshape(shape)
        target = net.fixed_input if name == "fixed_input" else net.params.get(name)
        if target is None or target.shape != shape:
            raise ValueError(f"checkpoint entry {name} {shape} does not match the network")
        target.data[...] = arr.astype(target.dtype)
