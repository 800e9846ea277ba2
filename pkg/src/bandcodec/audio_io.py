"""Mono WAV reading and writing (PCM16 or float32) via scipy."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioBuffer


class WavError(ValueError):
    pass


def read_wav(path, expected_rate: int | None = None) -> AudioBuffer:
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise WavError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 1:
        raise WavError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if expected_rate is not None and rate != expected_rate:
        raise WavError(f"{path}: sample rate {rate} Hz, model expects {expected_rate} Hz (no resampling)")
    if samples.size == 0:
        raise WavError(f"{path}: no samples")
    return AudioBuffer(samples, int(rate))


def write_wav(path, audio: AudioBuffer, pcm16: bool = False) -> None:
    x = np.asarray(audio.samples)
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(Path(path)), int(audio.sample_rate), data)
