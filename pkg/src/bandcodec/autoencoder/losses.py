"""Multiscale log-mel L1 reconstruction loss and its gradient."""

from __future__ import annotations

import numpy as np

from ..dsp import LOG_FLOOR, MEL_SCALES, N_MELS, mel_filterbank, stft, stft_adjoint


def _log_mel(x: np.ndarray, scale: int, sample_rate: int):
    window = 2**scale
    spec = stft(x, window, window // 4)
    power = spec.real**2 + spec.imag**2
    weights = mel_filterbank(N_MELS, window, sample_rate).weights
    energy = power @ weights.T
    return np.log(LOG_FLOOR + energy), spec, energy, weights


def mel_l1(
    prediction: np.ndarray, target: np.ndarray, sample_rate: int, with_grad: bool = True
) -> tuple[dict[int, float], np.ndarray | None]:
    """Per-scale mean |log-mel(pred) - log-mel(target)| and d(mean over scales)/d(pred).

    Inputs are ``(B, N)``; the returned gradient has the same shape.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction {pred.shape} and target {tgt.shape} differ in shape")
    per_scale: dict[int, float] = {}
    grad = np.zeros_like(pred) if with_grad else None
    n_scales = len(MEL_SCALES)
    for i in MEL_SCALES:
        mp, spec, energy, weights = _log_mel(pred, i, sample_rate)
        mt = _log_mel(tgt, i, sample_rate)[0]
        diff = mp - mt
        per_scale[i] = float(np.mean(np.abs(diff)))
        if with_grad:
            g_mel = np.sign(diff) / (diff.size * n_scales)
            g_power = (g_mel / (LOG_FLOOR + energy)) @ weights
            window = 2**i
            grad += stft_adjoint(2.0 * g_power * spec, pred.shape[-1], window, window // 4)
    return per_scale, grad


def multiscale_mel_loss(prediction, target, sample_rate: int) -> float:
    per_scale, _ = mel_l1(prediction, target, sample_rate, with_grad=False)
    return float(np.mean(list(per_scale.values())))
