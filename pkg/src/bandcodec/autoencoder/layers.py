"""Minimal layer set with explicit forward caches and reverse-mode backward passes.

Tensors are ``(batch, channels, length)``.  Each module keeps the cache of its
most recent forward call; ``backward`` consumes it, accumulates parameter
gradients into ``grads`` and returns the gradient with respect to the input.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingCacheError(RuntimeError):
    """``backward`` called without a preceding ``forward``."""


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, Module]] = []
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add(self, name: str, module: "Module") -> "Module":
        self.children.append((name, module))
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value
        for cname, child in self.children:
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.grads.items():
            yield prefix + name, value
        for cname, child in self.children:
            yield from child.named_grads(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children:
            yield from child.modules()

    def zero_grad(self) -> None:
        for m in self.modules():
            for g in m.grads.values():
                g.fill(0.0)

    def _take_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kernel: int, dilation: int, stride: int, l_out: int) -> np.ndarray:
    """``(B, C, l_out, kernel)`` view of the taps each output position reads."""
    span = (kernel - 1) * dilation + 1
    win = sliding_window_view(xp, span, axis=-1)
    return win[:, :, ::stride, ::dilation][:, :, :l_out]


def _scatter_taps(out: np.ndarray, taps: np.ndarray, dilation: int, stride: int) -> None:
    """Adjoint of :func:`_windows`: add ``taps`` ``(B, C, kernel, L)`` into ``out``."""
    kernel, length = taps.shape[2], taps.shape[3]
    for j in range(kernel):
        start = j * dilation
        out[:, :, start : start + stride * (length - 1) + 1 : stride] += taps[:, :, j, :]


def conv_output_length(length: int, kernel: int, stride: int, dilation: int, pad: tuple[int, int]) -> int:
    span = (kernel - 1) * dilation + 1
    return (length + pad[0] + pad[1] - span) // stride + 1


class Conv1d(Module):
    """Grouped, dilated, strided 1-D convolution with explicit (left, right) zero padding.

    Weights start as ``gain * N(0, 1/fan_in)``; biases start at zero.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        padding: tuple[int, int] | str = "same",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        gain: float = 1.0,
    ):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch} -> {out_ch}) not divisible by groups={groups}")
        if padding == "same":
            if kernel % 2 == 0:
                raise ValueError(f"same padding needs an odd kernel, got {kernel}")
            half = dilation * (kernel - 1) // 2
            padding = (half, half)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = tuple(int(p) for p in padding)
        rng = rng or np.random.default_rng(0)
        fan_in = (in_ch // groups) * kernel
        w = gain * rng.standard_normal((out_ch, in_ch // groups, kernel)) / np.sqrt(fan_in)
        self.add_param("weight", w.astype(dtype))
        self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, length = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        g = self.groups
        l_out = conv_output_length(length, self.kernel, self.stride, self.dilation, self.padding)
        xp = np.pad(x, ((0, 0), (0, 0), self.padding))
        win = _windows(xp, self.kernel, self.dilation, self.stride, l_out)
        cg = c // g
        cols = win.reshape(b, g, cg, l_out, self.kernel).transpose(0, 1, 2, 4, 3)
        cols = cols.reshape(b, g, cg * self.kernel, l_out)
        w = self.params["weight"].reshape(g, self.out_ch // g, cg * self.kernel)
        y = np.matmul(w, cols).reshape(b, self.out_ch, l_out)
        y += self.params["bias"][None, :, None]
        self._cache = (cols, length)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        cols, length = self._take_cache()
        b, _, l_out = grad.shape
        g, cg, k = self.groups, self.in_ch // self.groups, self.kernel
        gy = grad.reshape(b, g, self.out_ch // g, l_out)
        gw = np.matmul(gy, cols.transpose(0, 1, 3, 2)).sum(axis=0)
        self.grads["weight"] += gw.reshape(self.params["weight"].shape)
        self.grads["bias"] += grad.sum(axis=(0, 2))
        w = self.params["weight"].reshape(g, self.out_ch // g, cg * k)
        gcols = np.matmul(w.transpose(0, 2, 1), gy).reshape(b, self.in_ch, k, l_out)
        gxp = np.zeros((b, self.in_ch, length + sum(self.padding)), dtype=grad.dtype)
        _scatter_taps(gxp, gcols, self.dilation, self.stride)
        return gxp[:, :, self.padding[0] : self.padding[0] + length]


class ConvTranspose1d(Module):
    """Strided transposed convolution; ``trim`` removes (left, right) output samples."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int,
        trim: tuple[int, int] = (0, 0),
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.trim = tuple(int(t) for t in trim)
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel / stride
        w = rng.standard_normal((in_ch, out_ch, kernel)) / np.sqrt(fan_in)
        self.add_param("weight", w.astype(dtype))
        self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def output_length(self, length: int) -> int:
        return (length - 1) * self.stride + self.kernel - sum(self.trim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, length = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        w = self.params["weight"].reshape(self.in_ch, self.out_ch * self.kernel)
        taps = np.matmul(w.T, x).reshape(b, self.out_ch, self.kernel, length)
        full = np.zeros((b, self.out_ch, (length - 1) * self.stride + self.kernel), dtype=x.dtype)
        _scatter_taps(full, taps, 1, self.stride)
        y = full[:, :, self.trim[0] : full.shape[-1] - self.trim[1]]
        y += self.params["bias"][None, :, None]
        self._cache = x
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        b, _, length = x.shape
        gfull = np.pad(grad, ((0, 0), (0, 0), self.trim))
        win = _windows(gfull, self.kernel, 1, self.stride, length)  # (B, Co, T, k)
        gtaps = win.transpose(0, 1, 3, 2).reshape(b, self.out_ch * self.kernel, length)
        gw = np.matmul(x, gtaps.transpose(0, 2, 1)).sum(axis=0)
        self.grads["weight"] += gw.reshape(self.params["weight"].shape)
        self.grads["bias"] += grad.sum(axis=(0, 2))
        w = self.params["weight"].reshape(self.in_ch, self.out_ch * self.kernel)
        return np.matmul(w, gtaps)


# ---------------------------------------------------------------------------
# Snake
# ---------------------------------------------------------------------------

SNAKE_VARIANTS = ("vanilla", "amplitude", "full")


class Snake(Module):
    """Per-channel snake ``x + (beta/alpha) sin^2(alpha x) + gamma``.

    ``alpha`` and ``beta`` are stored as logs.  ``vanilla`` learns only
    alpha (beta = 1, gamma = 0), ``amplitude`` adds beta, ``full`` adds gamma.
    """

    def __init__(self, channels: int, variant: str = "full", dtype=np.float32):
        super().__init__()
        if variant not in SNAKE_VARIANTS:
            raise ValueError(f"snake variant must be one of {SNAKE_VARIANTS}")
        self.channels, self.variant = channels, variant
        self.add_param("log_alpha", np.zeros(channels, dtype=dtype))
        if variant in ("amplitude", "full"):
            self.add_param("log_beta", np.zeros(channels, dtype=dtype))
        if variant == "full":
            self.add_param("gamma", np.zeros(channels, dtype=dtype))

    def values(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Current ``(alpha, beta, gamma)`` per channel."""
        dtype = self.params["log_alpha"].dtype
        alpha = np.exp(self.params["log_alpha"])
        beta = np.exp(self.params["log_beta"]) if "log_beta" in self.params else np.ones(self.channels, dtype)
        gamma = self.params["gamma"] if "gamma" in self.params else np.zeros(self.channels, dtype)
        return alpha, beta, gamma

    def forward(self, x: np.ndarray) -> np.ndarray:
        alpha, beta, gamma = (v[None, :, None] for v in self.values())
        s = np.sin(alpha * x)
        self._cache = (x, s, alpha, beta)
        return x + (beta / alpha) * s * s + gamma

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, s, alpha, beta = self._take_cache()
        s2a = np.sin(2.0 * alpha * x)
        grad_log_alpha = grad * (beta * x * s2a - (beta / alpha) * s * s)
        self.grads["log_alpha"] += grad_log_alpha.sum(axis=(0, 2))
        if "log_beta" in self.params:
            self.grads["log_beta"] += (grad * (beta / alpha) * s * s).sum(axis=(0, 2))
        if "gamma" in self.params:
            self.grads["gamma"] += grad.sum(axis=(0, 2))
        return grad * (1.0 + beta * s2a)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for _, layer in self.children:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.children):
            grad = layer.backward(grad)
        return grad
