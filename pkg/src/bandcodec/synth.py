"""Seeded synthetic audio: sums of a few sinusoids with optional AM and a noise floor."""

from __future__ import annotations

import numpy as np

F_LOW = 80.0
F_HIGH = 8000.0


def sinusoid_mixture(
    n_samples: int,
    sample_rate: int,
    rng: np.random.Generator,
    max_partials: int = 5,
    am: bool = True,
    noise_db: float | None = -50.0,
    peak: float = 0.5,
) -> np.ndarray:
    """One clip of 1..``max_partials`` log-uniform tones in [80, 8000] Hz."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if not 1 <= max_partials:
        raise ValueError("max_partials must be at least 1")
    f_high = min(F_HIGH, 0.45 * sample_rate)
    t = np.arange(n_samples) / sample_rate
    x = np.zeros(n_samples)
    for _ in range(int(rng.integers(1, max_partials + 1))):
        f = np.exp(rng.uniform(np.log(F_LOW), np.log(f_high)))
        tone = rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if am:
            rate = rng.uniform(0.5, 8.0)
            depth = rng.uniform(0.0, 0.9)
            tone *= 1.0 - depth * 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        x += tone
    x *= peak / max(np.max(np.abs(x)), 1e-12)
    if noise_db is not None:
        x += peak * 10 ** (noise_db / 20) * rng.standard_normal(n_samples)
    return x


def synthetic_batch(batch: int, n_samples: int, sample_rate: int, seed: int, **kwargs) -> np.ndarray:
    """``(batch, n_samples)`` clips drawn from one seeded generator."""
    rng = np.random.default_rng(seed)
    return np.stack([sinusoid_mixture(n_samples, sample_rate, rng, **kwargs) for _ in range(batch)])
