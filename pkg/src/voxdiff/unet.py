"""Conditional 3D UNet noise predictor.

Four resolution levels on each side, two residual units per block. The
condition volume is concatenated channel-wise with the noisy target at the
input; the timestep enters through a sinusoidal embedding, a small MLP, and
a learned per-unit channel bias. Downsampling is a stride-2 convolution,
upsampling is nearest-neighbor 2x followed by a convolution, and encoder
features are concatenated into the decoder at matching resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, TensorNode
from .errors import ConfigError, ShapeError

DOWN_FACTOR = 16  # four halvings


@dataclass(frozen=True)
class UNetConfig:
    channel_widths: tuple[int, int, int, int] = (128, 256, 512, 512)
    in_channels: int = 2
    out_channels: int = 1
    time_embed_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))

    def validate(self):
        if len(self.channel_widths) != 4:
            raise ConfigError(
                f"channel_widths needs exactly 4 entries, got {len(self.channel_widths)}"
            )
        if any(w <= 0 for w in self.channel_widths):
            raise ConfigError("channel widths must be positive")
        if self.in_channels < 2:
            raise ConfigError("need at least 2 input channels (noisy target + condition)")
        if self.out_channels < 1:
            raise ConfigError("out_channels must be >= 1")
        if self.time_embed_dim < 4 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be an even integer >= 4")
        if self.groups < 1:
            raise ConfigError("groups must be >= 1")
        for c in self._norm_channel_counts():
            g = effective_groups(c, self.groups)
            if c % g:
                raise ConfigError(
                    f"{c} channels not divisible by {g} groups (from groups={self.groups})"
                )

    def _norm_channel_counts(self):
        """Channel counts at every normalization site in the block graph."""
        w = self.channel_widths
        counts = set(w)
        counts.add(2 * w[3])              # bottleneck output + deepest skip
        counts.update(w[i] + w[i + 1] for i in range(3))  # decoder concats
        return sorted(counts)


def effective_groups(channels: int, groups: int) -> int:
    """Group count for a normalization over `channels`; falls back to one
    group per channel when there are fewer channels than groups."""
    return groups if channels >= groups else channels


def desk_config() -> UNetConfig:
    """Small configuration for CPU-scale experiments."""
    return UNetConfig(channel_widths=(8, 16, 32, 32), time_embed_dim=32)


class _ResUnit:
    """norm -> swish -> conv -> +time bias -> norm -> swish -> conv, with a
    1x1x1 projection on the shortcut when channel counts differ."""

    def __init__(self, builder, prefix, c_in, c_out, groups, time_dim):
        self.c_in = c_in
        self.c_out = c_out
        self.g1 = effective_groups(c_in, groups)
        self.g2 = effective_groups(c_out, groups)
        self.gn1 = builder.norm(f"{prefix}.gn1", c_in)
        self.conv1 = builder.conv(f"{prefix}.conv1", c_in, c_out, 3)
        self.temb = builder.dense(f"{prefix}.temb", time_dim, c_out)
        self.gn2 = builder.norm(f"{prefix}.gn2", c_out)
        self.conv2 = builder.conv(f"{prefix}.conv2", c_out, c_out, 3)
        self.skip = builder.conv(f"{prefix}.skip", c_in, c_out, 1) if c_in != c_out else None

    def __call__(self, x, temb):
        h = ad.swish(ad.group_norm(x, self.g1, *self.gn1))
        h = ad.conv3d(h, *self.conv1, stride=1, padding=1)
        bias = ad.linear(temb, *self.temb)
        bias = ad.reshape(bias, bias.shape + (1, 1, 1))
        h = ad.add(h, bias)
        h = ad.swish(ad.group_norm(h, self.g2, *self.gn2))
        h = ad.conv3d(h, *self.conv2, stride=1, padding=1)
        shortcut = x if self.skip is None else ad.conv3d(x, *self.skip, stride=1, padding=0)
        return ad.add(h, shortcut)


class _Builder:
    """Registers initialized parameters in a deterministic order."""

    def __init__(self, store: ParameterStore, rng: np.random.Generator, dtype):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def conv(self, name, c_in, c_out, k):
        w = self.store.register(f"{name}.w", self._uniform((c_out, c_in, k, k, k), c_in * k**3))
        b = self.store.register(f"{name}.b", np.zeros(c_out, dtype=self.dtype))
        return w, b

    def dense(self, name, d_in, d_out):
        w = self.store.register(f"{name}.w", self._uniform((d_in, d_out), d_in))
        b = self.store.register(f"{name}.b", np.zeros(d_out, dtype=self.dtype))
        return w, b

    def norm(self, name, c):
        scale = self.store.register(f"{name}.scale", np.ones(c, dtype=self.dtype))
        shift = self.store.register(f"{name}.shift", np.zeros(c, dtype=self.dtype))
        return scale, shift


class UNet:
    """Noise-prediction network; build with `build_unet`."""

    def __init__(self, config: UNetConfig, store: ParameterStore, units, dtype):
        self.config = config
        self.params = store
        self.dtype = dtype
        self._units = units
        self._w = config.channel_widths
        self._g = config.groups
        self._tdim = config.time_embed_dim

    def _time_features(self, t_indices) -> TensorNode:
        rows = [
            ad.sinusoidal_time_embedding(int(t) - 1, self._tdim, self.dtype)
            for t in t_indices
        ]
        emb = TensorNode(np.stack(rows))
        h = ad.linear(emb, self.params["time.l1.w"], self.params["time.l1.b"])
        h = ad.swish(h)
        return ad.linear(h, self.params["time.l2.w"], self.params["time.l2.b"])

    def forward(self, x_t: TensorNode, y: TensorNode, t_indices) -> TensorNode:
        """Predict the noise component of `x_t` given condition `y` at steps
        `t_indices` (one 1-based step per batch item)."""
        if x_t.shape != y.shape:
            raise ShapeError(f"x_t {x_t.shape} and condition {y.shape} must match")
        if x_t.values.ndim != 5:
            raise ShapeError(f"expected (B,C,dx,dy,dz) input, got {x_t.shape}")
        spatial = x_t.shape[2:]
        if any(d % DOWN_FACTOR for d in spatial):
            raise ShapeError(f"spatial dims {spatial} must be divisible by {DOWN_FACTOR}")
        t_indices = np.atleast_1d(np.asarray(t_indices, dtype=np.int64))
        if len(t_indices) != x_t.shape[0]:
            raise ShapeError("need one timestep index per batch item")
        if np.any(t_indices < 1):
            raise ShapeError("timestep indices are 1-based")

        temb = self._time_features(t_indices)
        h = ad.concat_channels(x_t, y)
        h = ad.conv3d(h, self.params["stem.w"], self.params["stem.b"], 1, 1)

        skips = []
        for i in range(4):
            h = self._units[f"down{i}.res0"](h, temb)
            h = self._units[f"down{i}.res1"](h, temb)
            skips.append(h)
            h = ad.conv3d(
                h, self.params[f"down{i}.down.w"], self.params[f"down{i}.down.b"], 2, 1
            )

        h = self._units["mid.res0"](h, temb)
        h = self._units["mid.res1"](h, temb)

        for j in range(4):
            h = ad.upsample_nearest2x(h)
            h = ad.conv3d(
                h, self.params[f"up{j}.upconv.w"], self.params[f"up{j}.upconv.b"], 1, 1
            )
            h = ad.concat_channels(h, skips[3 - j])
            h = self._units[f"up{j}.res0"](h, temb)
            h = self._units[f"up{j}.res1"](h, temb)

        h = ad.swish(
            ad.group_norm(
                h,
                effective_groups(self._w[0], self._g),
                self.params["head.gn.scale"],
                self.params["head.gn.shift"],
            )
        )
        return ad.conv3d(h, self.params["head.conv.w"], self.params["head.conv.b"], 1, 1)

    def astype(self, dtype):
        self.params.astype(dtype)
        self.dtype = dtype
        return self


def build_unet(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> UNet:
    """Construct and initialize a UNet; the same seed yields bitwise-identical
    parameters."""
    cfg.validate()
    store = ParameterStore()
    builder = _Builder(store, rng, dtype)
    w = cfg.channel_widths
    tdim = cfg.time_embed_dim
    g = cfg.groups
    units: dict[str, _ResUnit] = {}

    builder.conv("stem", cfg.in_channels, w[0], 3)
    builder.dense("time.l1", tdim, tdim)
    builder.dense("time.l2", tdim, tdim)

    prev = w[0]
    for i in range(4):
        units[f"down{i}.res0"] = _ResUnit(builder, f"down{i}.res0", prev, w[i], g, tdim)
        units[f"down{i}.res1"] = _ResUnit(builder, f"down{i}.res1", w[i], w[i], g, tdim)
        builder.conv(f"down{i}.down", w[i], w[i], 3)
        prev = w[i]

    units["mid.res0"] = _ResUnit(builder, "mid.res0", w[3], w[3], g, tdim)
    units["mid.res1"] = _ResUnit(builder, "mid.res1", w[3], w[3], g, tdim)

    prev = w[3]
    for j in range(4):
        target = w[3 - j]
        builder.conv(f"up{j}.upconv", prev, prev, 3)
        units[f"up{j}.res0"] = _ResUnit(builder, f"up{j}.res0", prev + target, target, g, tdim)
        units[f"up{j}.res1"] = _ResUnit(builder, f"up{j}.res1", target, target, g, tdim)
        prev = target

    builder.norm("head.gn", w[0])
    builder.conv("head.conv", w[0], cfg.out_channels, 3)

    return UNet(cfg, store, units, dtype)


def config_to_text(cfg: UNetConfig) -> str:
    """Plain-text sidecar record for checkpoints."""
    return (
        f"channel_widths={','.join(str(x) for x in cfg.channel_widths)}\n"
        f"in_channels={cfg.in_channels}\n"
        f"out_channels={cfg.out_channels}\n"
        f"time_embed_dim={cfg.time_embed_dim}\n"
        f"groups={cfg.groups}\n"
    )


def config_from_text(text: str) -> UNetConfig:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        return UNetConfig(
            channel_widths=tuple(int(x) for x in fields["channel_widths"].split(",")),
            in_channels=int(fields["in_channels"]),
            out_channels=int(fields["out_channels"]),
            time_embed_dim=int(fields["time_embed_dim"]),
            groups=int(fields["groups"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed model config record: {exc}") from exc
