"""Spectral substrate: DFTs, latent band projection, STFT and mel filterbanks.

Band edges are expressed in Hz on the one-sided spectrum of the axis being
projected.  Bin ``b`` of a length-``n`` transform sampled at ``rate`` Hz sits at
``min(b, n - b) * rate / n`` Hz, so mirrored bins are always kept or dropped
together and projections of real input stay real.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

LOG_FLOOR = 1e-5
N_MELS = 64
MEL_SCALES = (7, 8, 9, 10, 11)


class SpectralError(ValueError):
    """Invalid input to a spectral operation."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SpectralError(f"audio must be mono (1-D), got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise SpectralError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise SpectralError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


# ---------------------------------------------------------------------------
# DFT
# ---------------------------------------------------------------------------


def dft_forward(x) -> np.ndarray:
    """Full complex DFT ``X[k] = sum_n x[n] exp(-2j*pi*k*n/N)`` of a real sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise SpectralError("dft_forward expects a non-empty 1-D sequence")
    if not np.all(np.isfinite(x)):
        raise SpectralError("dft_forward input must be finite")
    return np.fft.fft(x)


def is_conjugate_symmetric(spectrum: np.ndarray, rtol: float = 1e-9) -> bool:
    spectrum = np.asarray(spectrum)
    mirrored = np.conj(np.roll(spectrum[::-1], 1))
    scale = max(1.0, float(np.max(np.abs(spectrum), initial=0.0)))
    return bool(np.max(np.abs(spectrum - mirrored), initial=0.0) <= rtol * scale)


def dft_inverse(spectrum) -> np.ndarray:
    """Inverse DFT of a conjugate-symmetric spectrum, returned as a real sequence."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    if spectrum.ndim != 1 or spectrum.size == 0:
        raise SpectralError("dft_inverse expects a non-empty 1-D spectrum")
    if not is_conjugate_symmetric(spectrum):
        raise SpectralError("spectrum is not conjugate-symmetric; no real inverse exists")
    return np.fft.ifft(spectrum).real


# ---------------------------------------------------------------------------
# Bands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandRange:
    """Half-open band ``[f_min, f_max)`` in one-sided Hz.

    ``scale_factor`` is the latent-rate divisor the band was derived from
    (4, 2, 1 for the default plan).  ``nominal`` gives the edges on the
    two-sided ``[0, latent_rate]`` axis, which is how the default plan is
    usually quoted (18.75 / 37.5 / 75 Hz at a 75 Hz latent).
    """

    f_min: float
    f_max: float
    scale_factor: int = 1

    def __post_init__(self):
        if not (0.0 <= self.f_min < self.f_max) or not np.isfinite(self.f_max):
            raise SpectralError(f"invalid band [{self.f_min}, {self.f_max})")
        if self.scale_factor < 1:
            raise SpectralError("scale_factor must be a positive integer")

    @property
    def nominal(self) -> tuple[float, float]:
        return 2.0 * self.f_min, 2.0 * self.f_max

    def scaled(self, factor: float) -> "BandRange":
        """The same band with both edges multiplied by ``factor``."""
        return BandRange(self.f_min * factor, self.f_max * factor, self.scale_factor)


@dataclass(frozen=True)
class BandPlan:
    """Banded stages over the latent temporal spectrum plus full-band residual stages."""

    latent_rate: float
    bands: tuple[BandRange, ...]
    residual_stages: int = 0

    def __post_init__(self):
        if not self.latent_rate > 0:
            raise SpectralError("latent_rate must be positive")
        if self.residual_stages < 0:
            raise SpectralError("residual_stages must be non-negative")
        object.__setattr__(self, "bands", tuple(self.bands))
        nyquist = self.latent_rate / 2.0
        prev_max = 0.0
        for band in self.bands:
            if band.f_min < prev_max - 1e-12:
                raise SpectralError("bands must be ordered and non-overlapping")
            if band.f_max > nyquist * (1 + 1e-12):
                raise SpectralError(f"band edge {band.f_max} Hz exceeds Nyquist {nyquist} Hz")
            prev_max = band.f_max

    @property
    def n_banded(self) -> int:
        return len(self.bands)

    @property
    def n_stages(self) -> int:
        return len(self.bands) + self.residual_stages

    def stage_band(self, stage: int) -> BandRange | None:
        """Band of a zero-based stage, or ``None`` for a full-band residual stage."""
        if not 0 <= stage < self.n_stages:
            raise IndexError(f"stage {stage} out of range for {self.n_stages} stages")
        return self.bands[stage] if stage < len(self.bands) else None

    @property
    def nominal_edges(self) -> tuple[float, ...]:
        return tuple(b.nominal[1] for b in self.bands)

    def covers_spectrum(self) -> bool:
        if not self.bands:
            return False
        edges_ok = all(
            abs(a.f_max - b.f_min) <= 1e-12 for a, b in zip(self.bands, self.bands[1:])
        )
        return (
            edges_ok
            and self.bands[0].f_min == 0.0
            and abs(self.bands[-1].f_max - self.latent_rate / 2.0) <= 1e-12 * self.latent_rate
        )


def make_band_plan(
    latent_rate: float, ratios: Sequence[int] = (4, 2, 1), residual_stages: int = 1
) -> BandPlan:
    """Build a log-spaced band plan from descending power-of-two scale factors.

    Band ``k`` ends at ``latent_rate / ratios[k]`` on the two-sided axis,
    i.e. ``latent_rate / (2 * ratios[k])`` Hz one-sided, and starts where
    the previous band ended.
    """
    ratios = [int(r) for r in ratios]
    if not ratios:
        raise SpectralError("ratios must be non-empty")
    if not latent_rate > 0:
        raise SpectralError("latent_rate must be positive")
    for r in ratios:
        if r < 1 or r & (r - 1):
            raise SpectralError(f"ratio {r} is not a power of two")
    if any(a <= b for a, b in zip(ratios, ratios[1:])):
        raise SpectralError("ratios must be strictly descending")
    bands = []
    lo = 0.0
    for r in ratios:
        hi = latent_rate / (2.0 * r)
        bands.append(BandRange(lo, hi, r))
        lo = hi
    return BandPlan(float(latent_rate), tuple(bands), int(residual_stages))


def bin_frequencies(n: int, rate: float) -> np.ndarray:
    """One-sided frequency of every bin of a length-``n`` full DFT."""
    b = np.arange(n)
    return np.minimum(b, n - b) * (rate / n)


def band_mask(n: int, band: BandRange, rate: float) -> np.ndarray:
    """Boolean mask over the ``n`` full-DFT bins that belong to ``band``.

    The upper edge is exclusive except for a band that reaches Nyquist,
    which also owns the Nyquist bin.
    """
    f = bin_frequencies(n, rate)
    keep = f >= band.f_min
    if band.f_max >= rate / 2.0 * (1 - 1e-12):
        keep &= f <= band.f_max * (1 + 1e-12)
    else:
        keep &= f < band.f_max
    return keep


def _check_band(band: BandRange, rate: float) -> None:
    if band.f_min < 0 or band.f_max > rate / 2.0 * (1 + 1e-12):
        raise SpectralError(
            f"band [{band.f_min}, {band.f_max}) lies outside [0, {rate / 2.0}] Hz"
        )


def band_project(z, band: BandRange, latent_rate: float) -> np.ndarray:
    """Keep only the DFT bins of ``band`` along the last (time) axis of ``z``."""
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise SpectralError("band_project input must be finite")
    _check_band(band, latent_rate)
    n = z.shape[-1]
    mask = band_mask(n, band, latent_rate)[: n // 2 + 1]
    spec = np.fft.rfft(z, axis=-1)
    out = np.fft.irfft(spec * mask, n=n, axis=-1)
    return out.astype(z.dtype, copy=False) if np.issubdtype(z.dtype, np.floating) else out


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window (constant overlap-add at hop ``size / 4``)."""
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)
    w.setflags(write=False)
    return w


def _as_samples(audio) -> tuple[np.ndarray, int | None]:
    if isinstance(audio, AudioBuffer):
        return audio.samples, audio.sample_rate
    return np.asarray(audio), None


def _check_stft_args(n: int, window_size: int, hop: int) -> None:
    if window_size < 2 or window_size & (window_size - 1):
        raise SpectralError(f"window_size must be a power of two, got {window_size}")
    if hop < 1:
        raise SpectralError("hop must be positive")
    if n <= window_size // 2:
        raise SpectralError(
            f"audio of {n} samples is too short for a {window_size}-sample window"
        )


def stft_frame_count(n: int, window_size: int, hop: int) -> int:
    padded = n + 2 * (window_size // 2)
    return (padded - window_size) // hop + 1


def stft(audio, window_size: int, hop: int | None = None) -> np.ndarray:
    """Centered Hann-windowed STFT along the last axis.

    Output shape is ``(..., frames, window_size // 2 + 1)``.
    """
    x, _ = _as_samples(audio)
    hop = window_size // 4 if hop is None else hop
    _check_stft_args(x.shape[-1], window_size, hop)
    pad = window_size // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    padded = np.pad(x, widths, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_size, axis=-1)
    frames = frames[..., ::hop, :] * hann_window(window_size)
    return np.fft.rfft(frames, axis=-1)


def stft_adjoint(grad: np.ndarray, n_samples: int, window_size: int, hop: int | None = None):
    """Transpose of :func:`stft` as a real-linear map.

    ``grad`` holds ``dL/dRe + 1j * dL/dIm`` per bin; the result is ``dL/dx``.
    """
    hop = window_size // 4 if hop is None else hop
    _check_stft_args(n_samples, window_size, hop)
    grad = np.array(grad, dtype=np.complex128)
    grad[..., 0] *= 2.0
    grad[..., -1] *= 2.0
    frames = np.fft.irfft(grad, n=window_size, axis=-1) * (window_size / 2.0)
    frames = frames * hann_window(window_size)

    pad = window_size // 2
    n_frames = frames.shape[-2]
    padded_len = n_samples + 2 * pad
    lead = frames.shape[:-2]
    if window_size % hop == 0:
        r = window_size // hop
        chunks = frames.reshape(lead + (n_frames, r, hop))
        ola = np.zeros(lead + (n_frames + r - 1, hop))
        for c in range(r):
            ola[..., c : c + n_frames, :] += chunks[..., c, :]
        ola = ola.reshape(lead + ((n_frames + r - 1) * hop,))
    else:
        ola = np.zeros(lead + ((n_frames - 1) * hop + window_size,))
        for f in range(n_frames):
            ola[..., f * hop : f * hop + window_size] += frames[..., f, :]
    g_pad = np.zeros(lead + (padded_len,))
    used = min(ola.shape[-1], padded_len)
    g_pad[..., :used] = ola[..., :used]

    gx = g_pad[..., pad : pad + n_samples].copy()
    gx[..., 1 : pad + 1] += g_pad[..., :pad][..., ::-1]
    gx[..., n_samples - 1 - pad : n_samples - 1] += g_pad[..., pad + n_samples :][..., ::-1]
    return gx


# ---------------------------------------------------------------------------
# Mel
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    n_mels: int
    fft_size: int
    sample_rate: int
    weights: np.ndarray = field(repr=False)


@functools.lru_cache(maxsize=64)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> MelFilterbank:
    """Triangular filters equally spaced on the mel curve from 0 Hz to Nyquist.

    A filter narrower than the bin spacing would sample to all zeros; such
    rows get a unit weight on the bin closest to their centre instead.
    """
    if n_mels < 1 or fft_size < 2:
        raise SpectralError("n_mels and fft_size must be positive")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = ~np.any(weights > 0, axis=1)
    if np.any(empty):
        nearest = np.rint(edges[1:-1][empty] * fft_size / sample_rate).astype(int)
        weights[np.flatnonzero(empty), nearest] = 1.0
    weights.setflags(write=False)
    return MelFilterbank(n_mels, fft_size, sample_rate, weights)


def _scale_params(scale_index: int) -> tuple[int, int]:
    if scale_index not in MEL_SCALES:
        raise SpectralError(f"mel scale index must be one of {MEL_SCALES}, got {scale_index}")
    window = 2**scale_index
    return window, window // 4


def mel_energies(audio, scale_index: int, sample_rate: int | None = None) -> np.ndarray:
    """Linear mel energies (filterbank applied to the power spectrum)."""
    x, sr = _as_samples(audio)
    sr = sr if sr is not None else sample_rate
    if sr is None:
        raise SpectralError("sample_rate is required for raw sample arrays")
    window, hop = _scale_params(scale_index)
    spec = stft(x, window, hop)
    power = spec.real**2 + spec.imag**2
    return power @ mel_filterbank(N_MELS, window, int(sr)).weights.T


def mel_spectrogram(audio, scale_index: int, sample_rate: int | None = None) -> np.ndarray:
    """64-bin log-mel frames ``log(1e-5 + mel_energy)`` at window ``2**scale_index``."""
    return np.log(LOG_FLOOR + mel_energies(audio, scale_index, sample_rate))
