"""Objective reconstruction metrics, token statistics and the perceptual-entropy report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dsp import (
    LOG_FLOOR,
    MEL_SCALES,
    AudioBuffer,
    BandPlan,
    BandRange,
    band_mask,
    mel_spectrogram,
    stft,
)
from .quantizer import TokenStream

SNR_CAP_DB = 300.0
STFT_WINDOW = 1024
STFT_HOP = 256


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray, int | None]:
    ra = a.sample_rate if isinstance(a, AudioBuffer) else None
    rb = b.sample_rate if isinstance(b, AudioBuffer) else None
    if ra is not None and rb is not None and ra != rb:
        raise MetricError(f"sample rates differ: {ra} vs {rb}")
    xa = a.samples if isinstance(a, AudioBuffer) else np.asarray(a, dtype=np.float64)
    xb = b.samples if isinstance(b, AudioBuffer) else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise MetricError(f"length mismatch: {xa.shape} vs {xb.shape}")
    return xa, xb, ra if ra is not None else rb


def log_magnitude(x, window: int = STFT_WINDOW, hop: int = STFT_HOP) -> np.ndarray:
    return np.log(LOG_FLOOR + np.abs(stft(x, window, hop)))


def stft_distance(a, b) -> float:
    """Mean absolute difference of log-magnitude STFTs (window 1024, hop 256)."""
    xa, xb, _ = _pair(a, b)
    return float(np.mean(np.abs(log_magnitude(xa) - log_magnitude(xb))))


def mel_distance_per_scale(a, b, sample_rate: int | None = None) -> dict[int, float]:
    xa, xb, sr = _pair(a, b)
    sr = sr or sample_rate
    if sr is None:
        raise MetricError("sample_rate is required for raw arrays")
    return {
        i: float(np.mean(np.abs(mel_spectrogram(xa, i, sr) - mel_spectrogram(xb, i, sr))))
        for i in MEL_SCALES
    }


def mel_distance_multiscale(a, b, sample_rate: int | None = None) -> float:
    """Mean over window sizes 2**7 .. 2**11 of the mean L1 log-mel distance."""
    per_scale = mel_distance_per_scale(a, b, sample_rate)
    return float(np.mean(list(per_scale.values())))


def snr(reference, estimate) -> float:
    """Signal-to-noise ratio in dB, capped at 300 dB for exact reconstructions."""
    x, xh, _ = _pair(reference, estimate)
    signal = float(np.sum(x * x))
    if signal == 0.0:
        raise MetricError("reference signal is all zeros")
    noise = float(np.sum((x - xh) ** 2))
    if noise == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(signal / noise))


# ---------------------------------------------------------------------------
# Token statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageStatistics:
    stage: int
    entropy_bits: float
    perplexity: float
    histogram: np.ndarray = field(repr=False)

    @property
    def used_codes(self) -> int:
        return int(np.count_nonzero(self.histogram))


def entropy_bits(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricError("entropy of an empty histogram is undefined")
    p = counts[counts > 0] / total
    return float(max(0.0, -np.sum(p * np.log2(p))))


def token_statistics(tokens: TokenStream) -> list[StageStatistics]:
    """Per-stage empirical entropy (bits), perplexity and usage histogram."""
    idx = np.asarray(tokens.indices)
    if idx.size == 0:
        raise MetricError("token stream is empty")
    flat = idx.reshape(-1, idx.shape[-1])
    out = []
    for k in range(flat.shape[1]):
        hist = np.bincount(flat[:, k], minlength=2**tokens.bits)
        h = entropy_bits(hist)
        out.append(StageStatistics(k + 1, h, 2.0**h, hist))
    return out


def codebook_usage_perplexity(ema_counts) -> float:
    """Perplexity of the usage distribution implied by EMA counts."""
    return 2.0 ** entropy_bits(ema_counts)


# ---------------------------------------------------------------------------
# Perceptual entropy report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandEntry:
    stage: int
    band_hz: tuple[float, float]
    entropy_bits: float
    rate_bits: float
    distortion: float
    threshold: float
    offset: float

    @property
    def transparent(self) -> bool:
        return self.distortion <= self.threshold


@dataclass(frozen=True)
class PerceptualEntropyReport:
    entries: tuple[BandEntry, ...]

    @property
    def entropy_sum(self) -> float:
        return float(sum(e.entropy_bits for e in self.entries))

    @property
    def rate_sum(self) -> float:
        return float(sum(e.rate_bits for e in self.entries))

    @property
    def offset_sum(self) -> float:
        return float(sum(e.offset for e in self.entries))

    @property
    def bound(self) -> float:
        return self.entropy_sum - self.offset_sum

    @property
    def all_transparent(self) -> bool:
        return all(e.transparent for e in self.entries)

    def chain_holds(self) -> bool:
        """``bound <= sum H_k <= sum R_k`` with a small float allowance."""
        tol = 1e-9
        return self.bound <= self.entropy_sum + tol and self.entropy_sum <= self.rate_sum + tol

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            k = e.stage
            lines += [
                f"stage{k}.band_hz={e.band_hz[0]:g}-{e.band_hz[1]:g}",
                f"stage{k}.entropy_bits={e.entropy_bits:.6f}",
                f"stage{k}.rate_bits={e.rate_bits:g}",
                f"stage{k}.distortion={e.distortion:.6g}",
                f"stage{k}.threshold={e.threshold:g}",
                f"stage{k}.offset={e.offset:g}",
                f"stage{k}.transparent={str(e.transparent).lower()}",
            ]
        lines += [
            f"entropy_sum_bits={self.entropy_sum:.6f}",
            f"rate_sum_bits={self.rate_sum:g}",
            f"bound_bits={self.bound:.6f}",
        ]
        return "\n".join(lines) + "\n"

    CSV_COLUMNS = (
        "stage", "band_lo_hz", "band_hi_hz", "entropy_bits", "rate_bits",
        "distortion", "threshold", "offset", "transparent",
    )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for e in self.entries:
            w.writerow([
                e.stage, f"{e.band_hz[0]:g}", f"{e.band_hz[1]:g}", f"{e.entropy_bits:.6f}",
                f"{e.rate_bits:g}", f"{e.distortion:.6g}", f"{e.threshold:g}", f"{e.offset:g}",
                int(e.transparent),
            ])
        return buf.getvalue()


def audio_band(plan: BandPlan, stage: int, sample_rate: int) -> BandRange:
    """Audio-domain band of a stage: latent band edges scaled by the hop size."""
    band = plan.stage_band(stage)
    if band is None:
        return BandRange(0.0, sample_rate / 2.0)
    return band.scaled(sample_rate / plan.latent_rate)


def band_distortion(x, x_hat, band: BandRange, sample_rate: int, window: int = STFT_WINDOW) -> float:
    """RMS-over-frames L2 distance of STFT magnitudes restricted to ``band``."""
    mask = band_mask(window, band, sample_rate)[: window // 2 + 1]
    mx = np.abs(stft(x, window, window // 4))[..., mask]
    my = np.abs(stft(x_hat, window, window // 4))[..., mask]
    per_frame = np.sum((mx - my) ** 2, axis=-1)
    return float(np.sqrt(np.mean(per_frame)))


def perceptual_entropy_report(
    x,
    x_hat,
    tokens: TokenStream,
    plan: BandPlan,
    thresholds: Sequence[float] | None = None,
    offsets: Sequence[float] | None = None,
    sample_rate: int | None = None,
) -> PerceptualEntropyReport:
    """Per-stage entropy, allocated rate, band distortion and the masking bound.

    ``thresholds`` default to +inf and ``offsets`` to 0; neither has a model
    behind it here, they are supplied by the caller.
    """
    xa, xb, sr = _pair(x, x_hat)
    sr = sr or sample_rate
    if sr is None:
        raise MetricError("sample_rate is required for raw arrays")
    n = plan.n_stages
    if tokens.n_stages != n:
        raise MetricError(f"token stream has {tokens.n_stages} stages, plan has {n}")
    thresholds = [math.inf] * n if thresholds is None else [float(t) for t in thresholds]
    offsets = [0.0] * n if offsets is None else [float(o) for o in offsets]
    if len(thresholds) != n or len(offsets) != n:
        raise MetricError("need one threshold and one offset per stage")
    if any(o < 0 for o in offsets):
        raise MetricError("masking offsets must be non-negative")

    stats = token_statistics(tokens)
    entries = []
    for k in range(n):
        band = audio_band(plan, k, sr)
        entries.append(
            BandEntry(
                stage=k + 1,
                band_hz=(band.f_min, band.f_max),
                entropy_bits=stats[k].entropy_bits,
                rate_bits=float(tokens.bits),
                distortion=band_distortion(xa, xb, band, sr),
                threshold=thresholds[k],
                offset=offsets[k],
            )
        )
    return PerceptualEntropyReport(tuple(entries))
