"""Fully convolutional encoder/decoder with MRF fusion and inverted bottlenecks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from ..dsp import AudioBuffer
from .layers import Conv1d, ConvTranspose1d, Module, Snake


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    Channel width doubles after each downsampling stage starting from
    ``base_channels`` and is capped at ``max_channels``.
    """

    strides: tuple[int, ...] = (2, 4, 5, 8)
    base_channels: int = 16
    latent_dim: int = 32
    mrf_kernels: tuple[int, ...] = (3, 7)
    mrf_dilations: tuple[int, ...] = (1, 3)
    bottleneck_expansion: int = 4
    conv_groups: int = 4
    sample_rate: int = 24000
    bottleneck_kernel: int = 3
    max_channels: int = 256
    activation: str = "full"
    residual_gain: float = 0.1
    output_gain: float = 0.1

    def __post_init__(self):
        for name in ("strides", "mrf_kernels", "mrf_dilations"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.strides or any(s < 1 for s in self.strides):
            raise ConfigError("strides must be a non-empty list of positive integers")
        if not self.mrf_kernels or len(self.mrf_kernels) != len(self.mrf_dilations):
            raise ConfigError("mrf_kernels and mrf_dilations must be non-empty and equally long")
        if any(k % 2 == 0 for k in self.mrf_kernels) or self.bottleneck_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.sample_rate <= 0 or self.latent_dim <= 0 or self.base_channels <= 0:
            raise ConfigError("sample_rate, latent_dim and base_channels must be positive")
        for c in self.channels:
            if c % self.conv_groups or (c * self.bottleneck_expansion) % self.conv_groups:
                raise ConfigError(f"{c} channels not divisible into {self.conv_groups} groups")

    @property
    def hop(self) -> int:
        """Total downsampling factor."""
        return math.prod(self.strides)

    @property
    def latent_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(
            min(self.base_channels * 2**i, self.max_channels) for i in range(len(self.strides) + 1)
        )

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


#: Stride layouts and stage counts of the three operating points at 24 kHz.
VARIANTS = {
    "75hz": dict(strides=(2, 4, 5, 8), residual_stages=1),
    "25hz": dict(strides=(4, 5, 6, 8), residual_stages=3),
    "12.5hz": dict(strides=(3, 5, 8, 16), residual_stages=5),
}


@dataclass(frozen=True)
class LatentTensor:
    values: np.ndarray
    latent_rate: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.values.shape[-1]


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class ResidualBranch(Module):
    """``x + conv(snake(x))`` with a dilated same-padded convolution."""

    def __init__(self, channels, kernel, dilation, variant, rng, dtype, gain=1.0):
        super().__init__()
        self.act = self.add("act", Snake(channels, variant, dtype))
        self.conv = self.add(
            "conv", Conv1d(channels, channels, kernel, dilation=dilation, rng=rng, dtype=dtype, gain=gain)
        )

    def forward(self, x):
        return x + self.conv.forward(self.act.forward(x))

    def backward(self, grad):
        return grad + self.act.backward(self.conv.backward(grad))


class MRFBlock(Module):
    """Multi-receptive-field fusion: the mean of parallel residual branches."""

    def __init__(self, channels, kernels, dilations, variant="full", rng=None, dtype=np.float32, gain=1.0):
        super().__init__()
        if not kernels or len(kernels) != len(dilations):
            raise ValueError("kernels and dilations must be non-empty and equally long")
        if any(k % 2 == 0 for k in kernels):
            raise ValueError(f"MRF kernels must be odd, got {tuple(kernels)}")
        rng = rng or np.random.default_rng(0)
        self.branches = [
            self.add(f"branch{i}", ResidualBranch(channels, k, d, variant, rng, dtype, gain))
            for i, (k, d) in enumerate(zip(kernels, dilations))
        ]

    def forward(self, x):
        out = self.branches[0].forward(x)
        for br in self.branches[1:]:
            out = out + br.forward(x)
        return out / len(self.branches)

    def backward(self, grad):
        g = grad / len(self.branches)
        gx = self.branches[0].backward(g)
        for br in self.branches[1:]:
            gx = gx + br.backward(g)
        return gx


class InvertedBottleneck(Module):
    """``x + project(snake(grouped_expand(x)))`` with a 1x1 projection back to ``channels``."""

    def __init__(
        self, channels, expansion=4, groups=4, kernel=3, variant="full", rng=None, dtype=np.float32, gain=1.0
    ):
        super().__init__()
        hidden = channels * expansion
        if channels % groups or hidden % groups:
            raise ValueError(f"{channels} channels (x{expansion}) not divisible by {groups} groups")
        rng = rng or np.random.default_rng(0)
        self.expand = self.add("expand", Conv1d(channels, hidden, kernel, groups=groups, rng=rng, dtype=dtype))
        self.act = self.add("act", Snake(hidden, variant, dtype))
        self.project = self.add("project", Conv1d(hidden, channels, 1, rng=rng, dtype=dtype, gain=gain))

    def forward(self, x):
        return x + self.project.forward(self.act.forward(self.expand.forward(x)))

    def backward(self, grad):
        return grad + self.expand.backward(self.act.backward(self.project.backward(grad)))


def _stride_padding(stride: int) -> tuple[int, int]:
    # kernel 2*stride with `stride` samples of total padding maps L -> L / stride
    return (stride + 1) // 2, stride // 2


class EncoderBlock(Module):
    def __init__(self, c_in, c_out, stride, cfg: ModelConfig, rng, dtype):
        super().__init__()
        v, g = cfg.activation, cfg.residual_gain
        self.mrf = self.add("mrf", MRFBlock(c_in, cfg.mrf_kernels, cfg.mrf_dilations, v, rng, dtype, g))
        self.ib = self.add(
            "bottleneck",
            InvertedBottleneck(c_in, cfg.bottleneck_expansion, cfg.conv_groups, cfg.bottleneck_kernel, v, rng, dtype, g),
        )
        self.act = self.add("act", Snake(c_in, v, dtype))
        self.down = self.add(
            "down",
            Conv1d(c_in, c_out, 2 * stride, stride=stride, padding=_stride_padding(stride), rng=rng, dtype=dtype),
        )

    def forward(self, x):
        return self.down.forward(self.act.forward(self.ib.forward(self.mrf.forward(x))))

    def backward(self, grad):
        return self.mrf.backward(self.ib.backward(self.act.backward(self.down.backward(grad))))


class DecoderBlock(Module):
    def __init__(self, c_in, c_out, stride, cfg: ModelConfig, rng, dtype):
        super().__init__()
        v, g = cfg.activation, cfg.residual_gain
        self.act = self.add("act", Snake(c_in, v, dtype))
        self.up = self.add(
            "up", ConvTranspose1d(c_in, c_out, 2 * stride, stride, trim=_stride_padding(stride), rng=rng, dtype=dtype)
        )
        self.mrf = self.add("mrf", MRFBlock(c_out, cfg.mrf_kernels, cfg.mrf_dilations, v, rng, dtype, g))
        self.ib = self.add(
            "bottleneck",
            InvertedBottleneck(c_out, cfg.bottleneck_expansion, cfg.conv_groups, cfg.bottleneck_kernel, v, rng, dtype, g),
        )

    def forward(self, x):
        return self.ib.forward(self.mrf.forward(self.up.forward(self.act.forward(x))))

    def backward(self, grad):
        return self.act.backward(self.up.backward(self.mrf.backward(self.ib.backward(grad))))


class Encoder(Module):
    """``(B, 1, N)`` waveform to ``(B, d, N / hop)`` latent."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        ch = cfg.channels
        self.stem = self.add("stem", Conv1d(1, ch[0], 7, rng=rng, dtype=dtype))
        self.blocks = [
            self.add(f"block{i}", EncoderBlock(ch[i], ch[i + 1], s, cfg, rng, dtype))
            for i, s in enumerate(cfg.strides)
        ]
        self.act = self.add("act", Snake(ch[-1], cfg.activation, dtype))
        self.head = self.add("head", Conv1d(ch[-1], cfg.latent_dim, 3, rng=rng, dtype=dtype))

    def forward(self, x):
        x = self.stem.forward(x)
        for blk in self.blocks:
            x = blk.forward(x)
        return self.head.forward(self.act.forward(x))

    def backward(self, grad):
        grad = self.act.backward(self.head.backward(grad))
        for blk in reversed(self.blocks):
            grad = blk.backward(grad)
        return self.stem.backward(grad)


class Decoder(Module):
    """``(B, d, T)`` latent to ``(B, 1, T * hop)`` waveform."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(1)
        ch = cfg.channels
        self.stem = self.add("stem", Conv1d(cfg.latent_dim, ch[-1], 7, rng=rng, dtype=dtype))
        n = len(cfg.strides)
        self.blocks = [
            self.add(f"block{j}", DecoderBlock(ch[i + 1], ch[i], cfg.strides[i], cfg, rng, dtype))
            for j, i in enumerate(reversed(range(n)))
        ]
        self.act = self.add("act", Snake(ch[0], cfg.activation, dtype))
        self.head = self.add("head", Conv1d(ch[0], 1, 7, rng=rng, dtype=dtype, gain=cfg.output_gain))

    def forward(self, z):
        x = self.stem.forward(z)
        for blk in self.blocks:
            x = blk.forward(x)
        return self.head.forward(self.act.forward(x))

    def backward(self, grad):
        grad = self.act.backward(self.head.backward(grad))
        for blk in reversed(self.blocks):
            grad = blk.backward(grad)
        return self.stem.backward(grad)


# ---------------------------------------------------------------------------
# Codec and parameter access
# ---------------------------------------------------------------------------


class ParameterSet:
    """Ordered name -> array view over every parameter of a model."""

    def __init__(self, module: Module):
        self._module = module

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return self._module.named_parameters()

    def names(self) -> list[str]:
        return [n for n, _ in self]

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self._module.named_parameters())

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self._module.named_grads())

    def count(self) -> int:
        return sum(v.size for _, v in self)

    def load(self, values: dict[str, np.ndarray]) -> None:
        arrays = self.arrays()
        missing = set(arrays) - set(values)
        extra = set(values) - set(arrays)
        if missing or extra:
            raise ConfigError(f"parameter names differ (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in arrays.items():
            src = np.asarray(values[name])
            if src.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src


class Codec(Module):
    """Encoder and decoder sharing one config."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = self.add("encoder", Encoder(cfg, rng, dtype))
        self.decoder = self.add("decoder", Decoder(cfg, rng, dtype))

    @property
    def parameters(self) -> ParameterSet:
        return ParameterSet(self)

    def prepare(self, audio) -> np.ndarray:
        """Batch ``(B, N)`` or ``(N,)`` audio to ``(B, 1, ceil(N/hop)*hop)``, zero-padded on the right."""
        x = np.asarray(audio, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[-1] == 0:
            raise ValueError("audio must be a non-empty (N,) or (B, N) array")
        pad = self.cfg.n_frames(x.shape[-1]) * self.cfg.hop - x.shape[-1]
        return np.pad(x, ((0, 0), (0, pad)))[:, None, :]

    def encode_array(self, audio) -> np.ndarray:
        return self.encoder.forward(self.prepare(audio))

    def decode_array(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim == 2:
            z = z[None]
        if z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"latent dimension {z.shape[1]} does not match config ({self.cfg.latent_dim})")
        return self.decoder.forward(z)[:, 0, :]


def encode(audio: AudioBuffer, model: Codec) -> LatentTensor:
    if not isinstance(audio, AudioBuffer):
        raise TypeError("encode expects an AudioBuffer")
    if audio.sample_rate != model.cfg.sample_rate:
        raise ValueError(f"audio is {audio.sample_rate} Hz, model expects {model.cfg.sample_rate} Hz")
    if len(audio) == 0:
        raise ValueError("cannot encode empty audio")
    z = model.encode_array(audio.samples)[0]
    return LatentTensor(z, model.cfg.latent_rate)


def decode_latent(z: LatentTensor | np.ndarray, model: Codec) -> AudioBuffer:
    values = z.values if isinstance(z, LatentTensor) else np.asarray(z)
    if values.ndim != 2:
        raise ValueError("decode_latent expects a single (d, T) latent")
    y = model.decode_array(values)[0]
    return AudioBuffer(y.astype(np.float64), model.cfg.sample_rate)
