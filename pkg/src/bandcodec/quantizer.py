"""Band-split residual vector quantization with EMA codebooks.

Each stage quantizes the current residual frame by frame.  In ``mbs`` mode a
banded stage first projects the residual onto its band along the time axis
(FFT, zero out-of-band bins, inverse FFT) and quantizes that band-limited
signal; the chosen code vectors are subtracted from the *full* residual
before the next stage.  Stages past the last band quantize the full-band
residual.  ``vanilla`` mode skips the projection at every stage.

Latents are ``(d, T)`` or ``(B, d, T)`` arrays; tokens are ``(T, n_stages)``
or ``(B, T, n_stages)`` integer arrays.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .dsp import BandPlan, BandRange, band_project

DEFAULT_BITS = 9
DEFAULT_DECAY = 0.99
DEFAULT_EPS = 1e-5
DEAD_CODE_THRESHOLD = 1e-3
MODES = ("mbs", "vanilla")


class QuantizerError(ValueError):
    pass


@dataclass
class Codebook:
    """``2**bits`` code vectors plus their EMA count/sum accumulators."""

    vectors: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    decay: float = DEFAULT_DECAY
    smoothing_eps: float = DEFAULT_EPS
    initialized: bool = True

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float64)
        k = self.vectors.shape[0]
        if self.vectors.ndim != 2 or k & (k - 1) or k == 0:
            raise QuantizerError(f"codebook must hold 2**bits vectors, got shape {self.vectors.shape}")
        if self.ema_counts.shape != (k,) or self.ema_sums.shape != self.vectors.shape:
            raise QuantizerError("EMA accumulators do not match the code vectors")
        if not 0.0 < self.decay < 1.0:
            raise QuantizerError("decay must lie in (0, 1)")

    @classmethod
    def fresh(cls, vectors, decay: float = DEFAULT_DECAY, smoothing_eps: float = DEFAULT_EPS):
        """Codebook whose accumulators are consistent with ``vectors`` (counts 1)."""
        vectors = np.array(vectors, dtype=np.float64)
        return cls(vectors, np.ones(len(vectors)), vectors.copy(), decay, smoothing_eps)

    @classmethod
    def blank(cls, bits: int, dim: int, decay: float = DEFAULT_DECAY, smoothing_eps: float = DEFAULT_EPS):
        """Placeholder to be seeded from the first batch it sees."""
        k = 2**bits
        return cls(np.zeros((k, dim)), np.zeros(k), np.zeros((k, dim)), decay, smoothing_eps, False)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def bits(self) -> int:
        return self.size.bit_length() - 1

    def copy(self) -> "Codebook":
        return replace(
            self,
            vectors=self.vectors.copy(),
            ema_counts=self.ema_counts.copy(),
            ema_sums=self.ema_sums.copy(),
        )


# ---------------------------------------------------------------------------
# Code search and EMA learning
# ---------------------------------------------------------------------------


def nearest_codes(vectors: np.ndarray, x: np.ndarray, chunk: int = 8192):
    """Indices of the nearest code for each row of ``x`` and the squared distances.

    Ties resolve to the lowest index.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != vectors.shape[1]:
        raise QuantizerError(
            f"dimension mismatch: vectors of dim {x.shape[-1]} vs codebook dim {vectors.shape[1]}"
        )
    c_norm = np.einsum("kd,kd->k", vectors, vectors)
    idx = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), chunk):
        rows = x[start : start + chunk]
        scores = c_norm[None, :] - 2.0 * (rows @ vectors.T)
        idx[start : start + chunk] = np.argmin(scores, axis=1)
    diff = x - vectors[idx]
    return idx, np.einsum("nd,nd->n", diff, diff)


def nearest_code(cb: Codebook, v) -> tuple[int, float]:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.dim,):
        raise QuantizerError(f"vector of shape {v.shape} does not match codebook dim {cb.dim}")
    idx, dist = nearest_codes(cb.vectors, v[None, :])
    return int(idx[0]), float(dist[0])


def ema_update(cb: Codebook, indices, vectors) -> Codebook:
    """One EMA step from a batch of ``(index, vector)`` assignments.

    Counts and sums of every entry decay; only entries hit in this batch get
    their code vector recomputed as ``sum / (count + eps)``.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.size != indices.size * cb.dim:
        raise QuantizerError("assigned vectors do not match codebook dimension")
    vectors = vectors.reshape(indices.size, cb.dim)
    if indices.size and (indices.min() < 0 or indices.max() >= cb.size):
        raise QuantizerError(f"assignment index out of range [0, {cb.size})")

    hits = np.bincount(indices, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.ema_sums)
    if indices.size:
        np.add.at(sums, indices, vectors)

    out = cb.copy()
    out.ema_counts = cb.decay * cb.ema_counts + (1.0 - cb.decay) * hits
    out.ema_sums = cb.decay * cb.ema_sums + (1.0 - cb.decay) * sums
    hit = hits > 0
    out.vectors[hit] = out.ema_sums[hit] / (out.ema_counts[hit, None] + cb.smoothing_eps)
    return out


def revive_dead_codes(
    cb: Codebook, batch, rng: np.random.Generator, threshold: float = DEAD_CODE_THRESHOLD
) -> tuple[Codebook, int]:
    """Re-seed entries whose EMA count fell below ``threshold`` to random batch vectors."""
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, cb.dim)
    dead = np.flatnonzero(cb.ema_counts < threshold)
    if dead.size == 0 or len(batch) == 0:
        return cb, 0
    out = cb.copy()
    picks = batch[rng.integers(0, len(batch), size=dead.size)]
    out.vectors[dead] = picks
    out.ema_sums[dead] = picks
    out.ema_counts[dead] = 1.0
    return out, int(dead.size)


def kmeans_plusplus(data, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding.  Once every point is covered, remaining seeds are
    jittered copies of random points so duplicate entries can still separate."""
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if n == 0:
        raise QuantizerError("cannot seed a codebook from an empty batch")
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", data - centers[0], data - centers[0])
    spread = float(np.std(data)) or 1.0
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            j = rng.integers(n, size=k - i)
            centers[i:] = data[j] + 1e-3 * spread * rng.standard_normal((k - i, data.shape[1]))
            break
        centers[i] = data[rng.choice(n, p=d2 / total)]
        diff = data - centers[i]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return centers


def seed_codebook(cb: Codebook, data, rng: np.random.Generator) -> Codebook:
    return Codebook.fresh(kmeans_plusplus(data, cb.size, rng), cb.decay, cb.smoothing_eps)


# ---------------------------------------------------------------------------
# Stack, tokens, trace
# ---------------------------------------------------------------------------


@dataclass
class QuantizerStack:
    plan: BandPlan
    codebooks: list[Codebook]
    commit_weights: tuple[float, ...] = ()
    mode: str = "mbs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise QuantizerError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.codebooks = list(self.codebooks)
        if len(self.codebooks) != self.plan.n_stages:
            raise QuantizerError(
                f"{len(self.codebooks)} codebooks for a plan with {self.plan.n_stages} stages"
            )
        dims = {cb.dim for cb in self.codebooks}
        sizes = {cb.size for cb in self.codebooks}
        if len(dims) != 1 or len(sizes) != 1:
            raise QuantizerError("all codebooks must share dimension and size")
        if not self.commit_weights:
            self.commit_weights = (1.0,) * self.n_stages
        self.commit_weights = tuple(float(w) for w in self.commit_weights)
        if len(self.commit_weights) != self.n_stages:
            raise QuantizerError("one commitment weight per stage is required")

    @classmethod
    def create(
        cls,
        plan: BandPlan,
        dim: int,
        bits: int = DEFAULT_BITS,
        mode: str = "mbs",
        decay: float = DEFAULT_DECAY,
        smoothing_eps: float = DEFAULT_EPS,
        commit_weights: Sequence[float] = (),
    ) -> "QuantizerStack":
        books = [Codebook.blank(bits, dim, decay, smoothing_eps) for _ in range(plan.n_stages)]
        return cls(plan, books, tuple(commit_weights), mode)

    @property
    def n_stages(self) -> int:
        return self.plan.n_stages

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @property
    def bits(self) -> int:
        return self.codebooks[0].bits

    @property
    def initialized(self) -> bool:
        return all(cb.initialized for cb in self.codebooks)

    def stage_band(self, stage: int) -> BandRange | None:
        """Projection band of a zero-based stage (always ``None`` in vanilla mode)."""
        if self.mode == "vanilla":
            return None
        return self.plan.stage_band(stage)

    def copy(self) -> "QuantizerStack":
        return QuantizerStack(self.plan, [cb.copy() for cb in self.codebooks], self.commit_weights, self.mode)


@dataclass
class TokenStream:
    indices: np.ndarray
    frame_rate: float
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim not in (2, 3):
            raise QuantizerError("token indices must be (T, n_stages) or (B, T, n_stages)")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= 2**self.bits):
            raise QuantizerError(f"token index outside [0, {2**self.bits})")

    @property
    def n_stages(self) -> int:
        return self.indices.shape[-1]

    @property
    def n_frames(self) -> int:
        return self.indices.shape[-2]


@dataclass
class EncodeTrace:
    """Per-stage quantizer inputs ``b_k``, outputs ``q_k`` and residual norms."""

    stage_inputs: list[np.ndarray] = field(default_factory=list)
    quantized: list[np.ndarray] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)

    @property
    def n_stages(self) -> int:
        return len(self.quantized)


def _frames(z: np.ndarray) -> np.ndarray:
    return np.swapaxes(z, -1, -2).reshape(-1, z.shape[-2])


def _unframe(frames: np.ndarray, like_shape: tuple[int, ...]) -> np.ndarray:
    lead, d, t = like_shape[:-2], like_shape[-2], like_shape[-1]
    return np.swapaxes(frames.reshape(lead + (t, d)), -1, -2)


def _check_latent(z, q: QuantizerStack) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (2, 3):
        raise QuantizerError(f"latent must be (d, T) or (B, d, T), got shape {z.shape}")
    if z.shape[-2] != q.dim:
        raise QuantizerError(f"latent dimension {z.shape[-2]} does not match codebook dim {q.dim}")
    if not np.all(np.isfinite(z)):
        raise QuantizerError("latent must be finite")
    return z


def _rvq_encode(z, q: QuantizerStack, rng: np.random.Generator | None):
    z = _check_latent(z, q)
    if len(q.codebooks) != q.plan.n_stages:
        raise QuantizerError("stage/codebook count mismatch")
    residual = z
    zhat = np.zeros_like(z)
    indices = []
    trace = EncodeTrace()
    for k in range(q.n_stages):
        band = q.stage_band(k)
        b = residual if band is None else band_project(residual, band, q.plan.latent_rate)
        frames = _frames(b)
        cb = q.codebooks[k]
        if not cb.initialized:
            if rng is None:
                raise QuantizerError(f"codebook {k + 1} is not initialized")
            cb = q.codebooks[k] = seed_codebook(cb, frames, rng)
        idx, _ = nearest_codes(cb.vectors, frames)
        qk = _unframe(cb.vectors[idx], z.shape)
        residual = residual - qk
        zhat = zhat + qk
        indices.append(idx.reshape(z.shape[:-2] + (z.shape[-1],)))
        trace.stage_inputs.append(b)
        trace.quantized.append(qk)
        trace.residual_norms.append(float(np.linalg.norm(residual)))
    tokens = TokenStream(np.stack(indices, axis=-1), q.plan.latent_rate, q.bits)
    return tokens, zhat, trace


def mbs_rvq_encode(z, q: QuantizerStack, rng: np.random.Generator | None = None):
    """Band-split RVQ.  Returns ``(tokens, zhat, trace)``.

    ``rng`` is only needed when some codebook is still blank; it is then
    seeded in place by k-means++ from its first stage inputs.
    """
    if q.mode != "mbs":
        raise QuantizerError("mbs_rvq_encode requires a stack in 'mbs' mode")
    return _rvq_encode(z, q, rng)


def vanilla_rvq_encode(z, q: QuantizerStack, rng: np.random.Generator | None = None):
    """Plain full-band RVQ over the same stack layout."""
    if q.mode != "vanilla":
        raise QuantizerError("vanilla_rvq_encode requires a stack in 'vanilla' mode")
    return _rvq_encode(z, q, rng)


def quantize(z, q: QuantizerStack, rng: np.random.Generator | None = None):
    """Encode with whichever mode the stack is configured for."""
    return _rvq_encode(z, q, rng)


def subset_decode(tokens: TokenStream, q: QuantizerStack, stages: Iterable[int]) -> np.ndarray:
    """Sum of the code vectors of the selected stages (1-based stage numbers)."""
    stages = sorted(set(int(s) for s in stages))
    if not stages:
        raise QuantizerError("at least one stage must be selected")
    if tokens.n_stages != q.n_stages:
        raise QuantizerError(f"token stream has {tokens.n_stages} stages, quantizer has {q.n_stages}")
    bad = [s for s in stages if not 1 <= s <= q.n_stages]
    if bad:
        raise QuantizerError(f"stages {bad} outside 1..{q.n_stages}")
    idx = tokens.indices
    if idx.size and (idx.min() < 0 or idx.max() >= q.codebooks[0].size):
        raise QuantizerError("token index out of codebook range")
    lead, t = idx.shape[:-2], idx.shape[-2]
    out = np.zeros(lead + (t, q.dim))
    for s in stages:
        out = out + q.codebooks[s - 1].vectors[idx[..., s - 1]]
    return np.swapaxes(out, -1, -2)


def mbs_rvq_decode(tokens: TokenStream, q: QuantizerStack) -> np.ndarray:
    return subset_decode(tokens, q, range(1, q.n_stages + 1))


def update_codebooks(
    q: QuantizerStack, tokens: TokenStream, trace: EncodeTrace, rng: np.random.Generator
) -> int:
    """EMA-update every stage from its own inputs and revive dead codes, in place.

    Returns the number of revived entries.
    """
    revived = 0
    for k in range(q.n_stages):
        frames = _frames(trace.stage_inputs[k])
        idx = tokens.indices[..., k].reshape(-1)
        cb = ema_update(q.codebooks[k], idx, frames)
        cb, n = revive_dead_codes(cb, frames, rng)
        q.codebooks[k] = cb
        revived += n
    return revived


def fit_codebooks(q: QuantizerStack, batches: Iterable[np.ndarray], rng: np.random.Generator) -> QuantizerStack:
    """Train a stack on a stream of latent batches with encode + EMA steps."""
    for z in batches:
        tokens, _, trace = _rvq_encode(z, q, rng)
        update_codebooks(q, tokens, trace, rng)
    return q


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------


def commitment_loss(trace: EncodeTrace, weights: Sequence[float]) -> float:
    """``sum_i w_i * ||b_i - q_i||^2`` (squared Frobenius norm per stage)."""
    if len(weights) != trace.n_stages:
        raise QuantizerError(f"{len(weights)} weights for {trace.n_stages} stages")
    total = 0.0
    for w, b, qk in zip(weights, trace.stage_inputs, trace.quantized):
        diff = np.asarray(b, dtype=np.float64) - qk
        total += float(w) * float(np.sum(diff * diff))
    return total


def commitment_gradient(trace: EncodeTrace, q: QuantizerStack, weights: Sequence[float] | None = None):
    """Gradient of :func:`commitment_loss` with respect to the latent ``z``.

    Code vectors are constants (stop-gradient), so ``b_i`` depends on ``z``
    through the band projection alone, which is an orthogonal projector.
    """
    weights = q.commit_weights if weights is None else weights
    if len(weights) != trace.n_stages:
        raise QuantizerError(f"{len(weights)} weights for {trace.n_stages} stages")
    grad = np.zeros_like(trace.stage_inputs[0], dtype=np.float64)
    for k, (w, b, qk) in enumerate(zip(weights, trace.stage_inputs, trace.quantized)):
        g = 2.0 * float(w) * (b - qk)
        band = q.stage_band(k)
        grad += g if band is None else band_project(g, band, q.plan.latent_rate)
    return grad


def frozen_trace(z, q: QuantizerStack, quantized: Sequence[np.ndarray]) -> EncodeTrace:
    """Recompute stage inputs for ``z`` with the code choices held fixed.

    This is the function the straight-through surrogate differentiates.
    """
    z = np.asarray(z, dtype=np.float64)
    trace = EncodeTrace()
    residual = z
    for k, qk in enumerate(quantized):
        band = q.stage_band(k)
        b = residual if band is None else band_project(residual, band, q.plan.latent_rate)
        residual = residual - qk
        trace.stage_inputs.append(b)
        trace.quantized.append(qk)
        trace.residual_norms.append(float(np.linalg.norm(residual)))
    return trace


def ste_backward(upstream_grad, encoder_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Straight-through rule: the quantizer passes gradients through unchanged."""
    upstream_grad = np.asarray(upstream_grad)
    if encoder_shape is not None and tuple(upstream_grad.shape) != tuple(encoder_shape):
        raise QuantizerError(
            f"gradient shape {upstream_grad.shape} does not match encoder output {tuple(encoder_shape)}"
        )
    return upstream_grad.copy()


# ---------------------------------------------------------------------------
# Persistence (.mbsq)
# ---------------------------------------------------------------------------

MBSQ_MAGIC = b"MBSQ"
MBSQ_VERSION = 1
_MBSQ_HEAD = struct.Struct("<4sHHBBBBddd")
_MBSQ_BAND = struct.Struct("<ddH")


def write_quantizer(q: QuantizerStack, fh: BinaryIO) -> None:
    """Serialize a stack; layout is documented in ``docs/formats.md``."""
    if not q.initialized:
        raise QuantizerError("cannot save a stack with blank codebooks")
    cb0 = q.codebooks[0]
    fh.write(
        _MBSQ_HEAD.pack(
            MBSQ_MAGIC, MBSQ_VERSION, q.dim, q.bits, q.n_stages, MODES.index(q.mode),
            q.plan.n_banded, q.plan.latent_rate, cb0.decay, cb0.smoothing_eps,
        )
    )
    for band in q.plan.bands:
        fh.write(_MBSQ_BAND.pack(band.f_min, band.f_max, band.scale_factor))
    fh.write(np.asarray(q.commit_weights, dtype="<f8").tobytes())
    for cb in q.codebooks:
        fh.write(cb.vectors.astype("<f4").tobytes())
    for cb in q.codebooks:
        fh.write(cb.ema_counts.astype("<f8").tobytes())
        fh.write(cb.ema_sums.astype("<f8").tobytes())


def read_quantizer(fh: BinaryIO) -> QuantizerStack:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise QuantizerError(f"truncated quantizer file: wanted {n} bytes, got {len(buf)}")
        return buf

    magic, version, dim, bits, n_stages, mode, n_bands, rate, decay, eps = _MBSQ_HEAD.unpack(
        take(_MBSQ_HEAD.size)
    )
    if magic != MBSQ_MAGIC:
        raise QuantizerError(f"bad quantizer magic {magic!r}")
    if version != MBSQ_VERSION:
        raise QuantizerError(f"unsupported quantizer version {version}")
    if mode >= len(MODES) or n_bands > n_stages:
        raise QuantizerError("corrupt quantizer header")
    bands = []
    for _ in range(n_bands):
        lo, hi, scale = _MBSQ_BAND.unpack(take(_MBSQ_BAND.size))
        bands.append(BandRange(lo, hi, scale))
    plan = BandPlan(rate, tuple(bands), n_stages - n_bands)
    weights = np.frombuffer(take(8 * n_stages), dtype="<f8")
    k = 2**bits
    vecs = [np.frombuffer(take(4 * k * dim), dtype="<f4").reshape(k, dim) for _ in range(n_stages)]
    books = []
    for v in vecs:
        counts = np.frombuffer(take(8 * k), dtype="<f8")
        sums = np.frombuffer(take(8 * k * dim), dtype="<f8").reshape(k, dim)
        books.append(Codebook(v.astype(np.float64), counts.copy(), sums.copy(), decay, eps))
    return QuantizerStack(plan, books, tuple(weights), MODES[mode])


def quantizer_to_bytes(q: QuantizerStack) -> bytes:
    buf = io.BytesIO()
    write_quantizer(q, buf)
    return buf.getvalue()


def quantizer_from_bytes(data: bytes) -> QuantizerStack:
    return read_quantizer(io.BytesIO(data))
