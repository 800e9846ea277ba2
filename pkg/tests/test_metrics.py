import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandcodec.dsp import AudioBuffer, BandRange, make_band_plan
from bandcodec.metrics import (
    MetricError,
    PerceptualEntropyReport,
    audio_band,
    band_distortion,
    codebook_usage_perplexity,
    entropy_bits,
    mel_distance_multiscale,
    mel_distance_per_scale,
    perceptual_entropy_report,
    snr,
    stft_distance,
    token_statistics,
)
from bandcodec.quantizer import TokenStream

SR = 24000


def loop_log_stft(x, window=1024, hop=256):
    """Frame-by-frame log-magnitude STFT written longhand."""
    pad = window // 2
    xp = np.concatenate([x[1 : pad + 1][::-1], x, x[-pad - 1 : -1][::-1]])
    w = np.array([0.5 - 0.5 * math.cos(2 * math.pi * n / window) for n in range(window)])
    rows = []
    start = 0
    while start + window <= len(xp):
        rows.append(np.log(1e-5 + np.abs(np.fft.rfft(xp[start : start + window] * w))))
        start += hop
    return np.array(rows)


def tone(freq=440.0, n=SR, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


class TestSNR:
    def test_exact_is_capped(self):
        x = tone()
        assert snr(x, x) == 300.0

    def test_zero_estimate(self):
        assert snr(tone(), np.zeros(SR)) == pytest.approx(0.0, abs=1e-12)

    def test_ten_percent_error(self):
        x = tone()
        assert snr(x, 1.1 * x) == pytest.approx(20.0, abs=1e-9)

    def test_silent_reference(self):
        with pytest.raises(MetricError):
            snr(np.zeros(10), np.ones(10))

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            snr(np.ones(10), np.ones(11))

    def test_rate_mismatch(self):
        with pytest.raises(MetricError):
            snr(AudioBuffer(np.ones(10), 24000), AudioBuffer(np.ones(10), 16000))


class TestSTFTDistance:
    def test_identity(self):
        x = tone()
        assert stft_distance(x, x) == 0.0

    def test_tone_vs_silence_oracle(self):
        x = tone(n=8000)
        expected = np.mean(np.abs(loop_log_stft(x) - loop_log_stft(np.zeros(8000))))
        assert stft_distance(x, np.zeros(8000)) == pytest.approx(expected, rel=1e-10)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=4000), rng.normal(size=4000)
        assert stft_distance(a, b) == pytest.approx(stft_distance(b, a), rel=1e-14)


class TestMelDistance:
    def test_five_scales(self):
        rng = np.random.default_rng(1)
        per = mel_distance_per_scale(rng.normal(size=4000), rng.normal(size=4000), SR)
        assert sorted(per) == [7, 8, 9, 10, 11]
        assert all(v > 0 for v in per.values())

    def test_mean_of_scales(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=4000), rng.normal(size=4000)
        per = mel_distance_per_scale(a, b, SR)
        assert mel_distance_multiscale(a, b, SR) == pytest.approx(np.mean(list(per.values())))

    def test_needs_rate_for_arrays(self):
        with pytest.raises(MetricError):
            mel_distance_multiscale(np.ones(4000), np.ones(4000))

    def test_buffers_carry_rate(self):
        a = AudioBuffer(tone(n=4000), SR)
        assert mel_distance_multiscale(a, a) == 0.0

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.normal(size=3000) * rng.uniform(0.01, 1) for _ in range(3))
        dab = mel_distance_multiscale(a, b, SR)
        assert dab == pytest.approx(mel_distance_multiscale(b, a, SR), rel=1e-12)
        assert dab <= mel_distance_multiscale(a, c, SR) + mel_distance_multiscale(c, b, SR) + 1e-12


class TestEntropy:
    def test_two_symbol(self):
        assert entropy_bits([3, 1]) == pytest.approx(0.811278, abs=1e-6)

    def test_uniform_512(self):
        assert entropy_bits(np.ones(512)) == pytest.approx(9.0, abs=1e-12)

    def test_single_symbol(self):
        assert entropy_bits([0, 7, 0]) == 0.0

    def test_empty(self):
        with pytest.raises(MetricError):
            entropy_bits(np.zeros(4))

    def test_perplexity(self):
        assert codebook_usage_perplexity(np.ones(64)) == pytest.approx(64.0)

    def test_token_statistics(self):
        idx = np.stack([np.arange(512), np.zeros(512, int)], axis=1)
        stats = token_statistics(TokenStream(idx, 75.0, 9))
        assert stats[0].entropy_bits == pytest.approx(9.0)
        assert stats[0].used_codes == 512
        assert stats[1].entropy_bits == 0.0 and stats[1].perplexity == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 511), min_size=1, max_size=400))
    def test_bounded_by_bits(self, codes):
        stats = token_statistics(TokenStream(np.array(codes)[:, None], 75.0, 9))
        assert 0.0 <= stats[0].entropy_bits <= 9.0 + 1e-12


class TestPerceptualEntropy:
    def setup_method(self):
        self.plan = make_band_plan(75.0)
        rng = np.random.default_rng(3)
        self.tokens = TokenStream(rng.integers(0, 512, (75, 4)), 75.0, 9)
        self.x = tone(n=SR)
        self.xh = self.x + 1e-3 * rng.normal(size=SR)

    def test_audio_bands(self):
        edges = [audio_band(self.plan, k, SR) for k in range(4)]
        assert [(b.f_min, b.f_max) for b in edges] == [
            (0.0, 3000.0), (3000.0, 6000.0), (6000.0, 12000.0), (0.0, 12000.0)
        ]

    def test_chain(self):
        r = perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan, sample_rate=SR,
                                      offsets=[0.5, 0.1, 0.0, 0.2])
        assert r.chain_holds()
        assert r.rate_sum == 36.0
        assert r.bound == pytest.approx(r.entropy_sum - 0.8)

    def test_bound_monotone_in_offsets(self):
        small = perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan, offsets=[0.1] * 4,
                                          sample_rate=SR)
        large = perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan, offsets=[0.3] * 4,
                                          sample_rate=SR)
        assert large.bound < small.bound

    def test_negative_offset(self):
        with pytest.raises(MetricError):
            perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan,
                                      offsets=[0, 0, -0.1, 0], sample_rate=SR)

    def test_stage_count_mismatch(self):
        short = TokenStream(self.tokens.indices[:, :3], 75.0, 9)
        with pytest.raises(MetricError):
            perceptual_entropy_report(self.x, self.xh, short, self.plan, sample_rate=SR)

    def test_transparency(self):
        r = perceptual_entropy_report(self.x, self.x, self.tokens, self.plan, thresholds=[0.0] * 4,
                                      sample_rate=SR)
        assert r.all_transparent
        r = perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan, thresholds=[0.0] * 4,
                                      sample_rate=SR)
        assert not r.all_transparent

    def test_band_distortion_is_local(self):
        # a 500 Hz error should barely leak into the top band (Hann sidelobes only)
        err = 0.01 * np.sin(2 * np.pi * 500 * np.arange(SR) / SR)
        low = band_distortion(self.x, self.x + err, BandRange(0.0, 3000.0), SR)
        high = band_distortion(self.x, self.x + err, BandRange(6000.0, 12000.0), SR)
        assert low > 1.0 and high < 1e-2 * low

    def test_text_and_csv(self):
        r = perceptual_entropy_report(self.x, self.xh, self.tokens, self.plan, sample_rate=SR)
        text = r.to_text()
        assert "stage1.band_hz=0-3000" in text and "rate_sum_bits=36" in text
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert tuple(rows[0]) == PerceptualEntropyReport.CSV_COLUMNS
        assert len(rows) == 5
        assert rows[4][1:3] == ["0", "12000"]
