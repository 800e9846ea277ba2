"""Snake activation with learnable amplitude and bias.

``f(x) = x + (beta / alpha) * sin(alpha * x)**2 + gamma``

With ``beta = 1`` and ``gamma = 0`` this is the ordinary snake function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ActivationError(ValueError):
    pass


@dataclass(frozen=True)
class SnakeParams:
    """Per-channel (or scalar) snake parameters; broadcast against the input."""

    alpha: np.ndarray | float = 1.0
    beta: np.ndarray | float = 1.0
    gamma: np.ndarray | float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise ActivationError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if np.any(self.alpha <= 0):
            raise ActivationError("alpha must be strictly positive")

    @classmethod
    def vanilla(cls, alpha=1.0) -> "SnakeParams":
        return cls(alpha=alpha, beta=1.0, gamma=0.0)


def snake_forward(x, p: SnakeParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + (p.beta / p.alpha) * np.sin(p.alpha * x) ** 2 + p.gamma


def snake_derivative(x, p: SnakeParams) -> np.ndarray:
    """``df/dx = 1 + beta * sin(2 * alpha * x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 + p.beta * np.sin(2.0 * p.alpha * x)


def lipschitz_probe(
    p: SnakeParams,
    domain: tuple[float, float] = (-10.0, 10.0),
    n_samples: int = 100_000,
    seed: int = 0,
) -> float:
    """Largest secant slope ``|f(x1) - f(x2)| / |x1 - x2|`` over sampled pairs.

    Half the pairs are adjacent points of a sorted uniform grid (these
    approach the supremum of ``|f'|``); the other half are random pairs.
    Scalar parameters only.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo or not np.isfinite(hi - lo):
        raise ActivationError(f"degenerate domain {domain}")
    if n_samples < 2:
        raise ActivationError("n_samples must be at least 2")
    if p.alpha.size != 1 or p.beta.size != 1 or p.gamma.size != 1:
        raise ActivationError("lipschitz_probe takes scalar parameters")
    rng = np.random.default_rng(seed)

    n_grid = max(2, n_samples // 2)
    grid = np.linspace(lo, hi, n_grid + 1)
    fg = snake_forward(grid, p)
    slopes = [np.abs(np.diff(fg)) / np.diff(grid)]

    n_rand = n_samples - n_grid
    if n_rand > 0:
        x1 = rng.uniform(lo, hi, n_rand)
        x2 = rng.uniform(lo, hi, n_rand)
        gap = np.abs(x1 - x2)
        ok = gap > 1e-9 * (hi - lo)
        slopes.append(
            np.abs(snake_forward(x1[ok], p) - snake_forward(x2[ok], p)) / gap[ok]
        )
    return float(max(s.max(initial=0.0) for s in slopes))
