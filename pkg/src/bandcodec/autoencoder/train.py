"""One-step training: encode, quantize with the straight-through rule, decode, update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dsp import MEL_SCALES
from ..quantizer import (
    EncodeTrace,
    QuantizerStack,
    TokenStream,
    commitment_gradient,
    commitment_loss,
    frozen_trace,
    quantize,
    ste_backward,
    update_codebooks,
)
from .losses import mel_l1
from .model import Codec

COMMIT_WEIGHT = 0.25
LEARNING_RATE = 2e-4
BETAS = (0.9, 0.999)


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass
class Adam:
    """Adam without weight decay; moments are keyed by parameter name."""

    lr: float = LEARNING_RATE
    betas: tuple[float, float] = BETAS
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass(frozen=True)
class LossReport:
    step: int
    total: float
    mel: float
    mel_per_scale: dict[int, float]
    commitment: float
    revived_codes: int = 0

    def as_row(self) -> dict[str, float]:
        row = {"step": self.step, "total": self.total, "mel": self.mel, "commitment": self.commitment}
        for i in MEL_SCALES:
            row[f"mel_{2**i}"] = self.mel_per_scale[i]
        row["revived_codes"] = self.revived_codes
        return row


CSV_FIELDS = ("step", "total", "mel", "commitment", *(f"mel_{2**i}" for i in MEL_SCALES), "revived_codes")


@dataclass
class ForwardResult:
    z: np.ndarray
    offset: np.ndarray
    tokens: TokenStream | None
    trace: EncodeTrace
    mel_per_scale: dict[int, float]
    commitment: float

    @property
    def mel(self) -> float:
        return float(np.mean(list(self.mel_per_scale.values())))


def forward_backward(
    model: Codec,
    q: QuantizerStack,
    audio: np.ndarray,
    commit_weight: float = COMMIT_WEIGHT,
    rng: np.random.Generator | None = None,
    frozen: tuple[np.ndarray, list[np.ndarray]] | None = None,
    with_grad: bool = True,
) -> ForwardResult:
    """Loss of one batch and, optionally, gradients accumulated into ``model.grads``.

    The decoder sees ``z + offset`` with ``offset = zhat - z`` held constant,
    which is the straight-through estimator.  Passing ``frozen=(offset,
    quantized)`` reuses earlier code choices so the loss becomes a smooth
    function of the parameters; that is what finite differences check.
    The commitment term is averaged over latent elements.
    """
    x = model.prepare(audio)
    z = model.encoder.forward(x)
    z64 = z.astype(np.float64)
    if not np.all(np.isfinite(z64)):
        raise NumericalError("encoder produced a non-finite latent")
    if frozen is None:
        tokens, zhat, trace = quantize(z64, q, rng)
        offset = zhat - z64
    else:
        offset, quantized = frozen
        tokens = None
        trace = frozen_trace(z64, q, quantized)
    dec_in = (z64 + offset).astype(model.dtype)
    y = model.decoder.forward(dec_in)[:, 0, :]

    target = x[:, 0, :]
    per_scale, g_y = mel_l1(y, target, model.cfg.sample_rate, with_grad=with_grad)
    commit = commitment_loss(trace, q.commit_weights) / z.size
    result = ForwardResult(z, offset, tokens, trace, per_scale, commit)
    if not with_grad:
        return result

    g_dec_in = model.decoder.backward(g_y[:, None, :].astype(model.dtype))
    g_z = ste_backward(g_dec_in, z.shape).astype(np.float64)
    if commit_weight:
        g_z += commit_weight * commitment_gradient(trace, q) / z.size
    model.encoder.backward(g_z.astype(model.dtype))
    return result


def _check_finite(step: int, result: ForwardResult, model: Codec) -> None:
    terms = {"mel": result.mel, "commitment": result.commitment}
    bad = [k for k, v in terms.items() if not np.isfinite(v)]
    if bad:
        raise NumericalError(f"step {step}: non-finite {', '.join(bad)} loss ({terms})")
    for name, g in model.named_grads():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"step {step}: non-finite gradient for {name}")


def train_step(
    batch: np.ndarray,
    model: Codec,
    q: QuantizerStack,
    opt: Adam,
    rng: np.random.Generator,
    commit_weight: float = COMMIT_WEIGHT,
) -> LossReport:
    """Forward, backward, one Adam update and one EMA codebook update."""
    step = opt.t + 1
    model.zero_grad()
    result = forward_backward(model, q, batch, commit_weight, rng)
    _check_finite(step, result, model)
    opt.step(dict(model.named_parameters()), dict(model.named_grads()))
    revived = update_codebooks(q, result.tokens, result.trace, rng)
    total = result.mel + commit_weight * result.commitment
    return LossReport(step, total, result.mel, dict(result.mel_per_scale), result.commitment, revived)


def train(
    model: Codec,
    q: QuantizerStack,
    batches,
    steps: int,
    seed: int = 0,
    lr: float = LEARNING_RATE,
    commit_weight: float = COMMIT_WEIGHT,
    callback=None,
) -> list[LossReport]:
    """Run ``steps`` updates, cycling through ``batches`` (a list of ``(B, N)`` arrays)."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    history = []
    for s in range(steps):
        report = train_step(batches[s % len(batches)], model, q, opt, rng, commit_weight)
        history.append(report)
        if callback is not None:
            callback(report)
    return history
