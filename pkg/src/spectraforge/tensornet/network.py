"""Asymmetric encoder-decoder: deep spatial descent, shallow ascent, wide spectral head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ACTIVATIONS,
    DTYPE,
    ShapeError,
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    maxpool2,
)

MAX_CHANNEL_RATIO = 2.0


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    """Shapes are (H, W, C) as stored on disk; tensors inside the net are NCHW.

    ``encoder_channels`` has ``encoder_levels + 1`` entries starting at the
    input band count. ``decoder_channels`` has ``decoder_levels + 1``
    entries starting at the bottleneck width and ending at the output band
    count. ``skip_map`` maps encoder level to decoder level.
    """

    input: tuple[int, int, int]
    output: tuple[int, int, int]
    encoder_levels: int
    encoder_channels: list[int]
    decoder_levels: int
    decoder_channels: list[int]
    skip_map: dict[int, int] = field(default_factory=dict)
    activation: str = "leaky_relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        self.input = tuple(int(v) for v in self.input)
        self.output = tuple(int(v) for v in self.output)
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        if not self.skip_map:
            self.skip_map = {self.encoder_levels - 1 - j: j for j in range(self.decoder_levels)}
        self.skip_map = {int(k): int(v) for k, v in self.skip_map.items()}
        self.validate()

    def validate(self) -> None:
        if len(self.input) != 3 or len(self.output) != 3:
            raise ConfigError("input and output must be (H, W, C)")
        if min(self.input) < 1 or min(self.output) < 1:
            raise ConfigError("dimensions must be positive")
        if self.encoder_levels < 1:
            raise ConfigError("need at least one encoder level")
        if not 0 <= self.decoder_levels < self.encoder_levels:
            raise ConfigError("decoder_levels must be smaller than encoder_levels")
        if len(self.encoder_channels) != self.encoder_levels + 1:
            raise ConfigError("encoder_channels needs encoder_levels + 1 entries")
        if len(self.decoder_channels) != self.decoder_levels + 1:
            raise ConfigError("decoder_channels needs decoder_levels + 1 entries")
        if self.encoder_channels[0] != self.input[2]:
            raise ConfigError("encoder_channels must start at the input band count")
        if self.decoder_channels[0] != self.encoder_channels[-1]:
            raise ConfigError("decoder_channels must start at the bottleneck width")
        if self.decoder_channels[-1] != self.output[2]:
            raise ConfigError("decoder_channels must end at the output band count")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise ConfigError("channel counts must be positive")
        dc = self.decoder_channels
        for a, b in zip(dc, dc[1:]):
            if max(a, b) / min(a, b) > MAX_CHANNEL_RATIO:
                raise ConfigError(f"decoder step {a} -> {b} exceeds ratio {MAX_CHANNEL_RATIO}")
        for enc, dec in self.skip_map.items():
            if not 0 <= enc < self.encoder_levels or not 0 <= dec < self.decoder_levels:
                raise ConfigError(f"skip {enc} -> {dec} out of range")
        if len(set(self.skip_map.values())) != len(self.skip_map):
            raise ConfigError("each decoder level takes at most one skip")
        h, w = self.input[:2]
        if h >> self.encoder_levels < 1 or w >> self.encoder_levels < 1:
            raise ConfigError(f"input {h}x{w} too small for {self.encoder_levels} pooling levels")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {name!r}")

    def skip_for(self, dec_level: int) -> int | None:
        for enc, dec in self.skip_map.items():
            if dec == dec_level:
                return enc
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input"] = list(self.input)
        d["output"] = list(self.output)
        d["skip_map"] = {str(k): v for k, v in sorted(self.skip_map.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def tiny(cls, in_hw=(64, 64), out_hw=(16, 16), in_bands=8, out_bands=32) -> "NetworkConfig":
        return cls(
            input=(*in_hw, in_bands),
            output=(*out_hw, out_bands),
            encoder_levels=4,
            encoder_channels=[in_bands, 16, 32, 64, 128],
            decoder_levels=2,
            decoder_channels=[128, 64, out_bands],
        )

    @classmethod
    def full(cls) -> "NetworkConfig":
        return cls(
            input=(1024, 1024, 8),
            output=(286, 286, 299),
            encoder_levels=5,
            encoder_channels=[8, 32, 64, 128, 256, 512],
            decoder_levels=3,
            decoder_channels=[512, 416, 352, 299],
        )


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class AsymmetricUNet:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        ec, dc = cfg.encoder_channels, cfg.decoder_channels
        for i in range(cfg.encoder_levels):
            self._conv(f"enc{i}.conv0", ec[i], ec[i + 1], 3, rng)
            self._conv(f"enc{i}.conv1", ec[i + 1], ec[i + 1], 3, rng)
        for j in range(cfg.decoder_levels):
            enc = cfg.skip_for(j)
            skip_ch = ec[enc + 1] if enc is not None else 0
            self._conv(f"dec{j}.conv0", dc[j] + skip_ch, dc[j + 1], 3, rng)
            self._conv(f"dec{j}.conv1", dc[j + 1], dc[j + 1], 3, rng)
        self._conv("head", dc[-1], cfg.output[2], 1, rng)

    def _conv(self, name, c_in, c_out, k, rng):
        self.params[f"{name}.w"] = Tensor(he_uniform(rng, (c_out, c_in, k, k)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, x) -> Tensor:
        """(N, C_in, H, W) -> (N, B_out, H_out, W_out)."""
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        h, w, c = cfg.input
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ShapeError(f"network expects (N, {c}, {h}, {w}), got {x.shape}")
        act = ACTIVATIONS[cfg.activation]
        skips = []
        for i in range(cfg.encoder_levels):
            x = act(self._apply(f"enc{i}.conv0", x))
            x = act(self._apply(f"enc{i}.conv1", x))
            skips.append(x)
            x = maxpool2(x)
        for j in range(cfg.decoder_levels):
            x = bilinear_resize(x, (2 * x.shape[2], 2 * x.shape[3]))
            enc = cfg.skip_for(j)
            if enc is not None:
                x = concat_channels(x, bilinear_resize(skips[enc], x.shape[2:]))
            x = act(self._apply(f"dec{j}.conv0", x))
            x = act(self._apply(f"dec{j}.conv1", x))
        x = bilinear_resize(x, cfg.output[:2])
        return ACTIVATIONS[cfg.output_activation](self._apply("head", x))

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter names do not match the network")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ConfigError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def build_network(cfg: NetworkConfig, rng: np.random.Generator) -> AsymmetricUNet:
    cfg.validate()
    return AsymmetricUNet(cfg, rng)
