"""``.mbst`` token container and bitrate accounting.

Layout (all multi-byte integers little-endian)::

    offset size field
    0      4    magic "MBST"
    4      2    version (u16) = 1
    6      4    sample_rate (u32, Hz)
    10     4    frame_rate numerator (u32)
    14     4    frame_rate denominator (u32)
    18     1    n_stages (u8)
    19     1    bits_per_code (u8, 1..16)
    20     4    frame_count (u32)
    24     8    config_hash (opaque)
    32     ...  payload

The payload holds ``frame_count * n_stages`` codes of ``bits_per_code`` bits,
MSB first, frame by frame with the stages of a frame in order, zero-padded
to a byte boundary only at the end of the stream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .quantizer import TokenStream

MAGIC = b"MBST"
VERSION = 1
HEADER = struct.Struct("<4sHIIIBBI8s")


class BitstreamError(ValueError):
    """Malformed or inconsistent token stream."""


class MagicError(BitstreamError):
    pass


class VersionError(BitstreamError):
    pass


class TruncatedError(BitstreamError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated stream: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class StreamHeader:
    sample_rate: int
    frame_rate: Fraction
    n_stages: int
    bits_per_code: int
    frame_count: int
    config_hash: bytes = bytes(8)
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "frame_rate", Fraction(self.frame_rate))
        if not 1 <= self.bits_per_code <= 16:
            raise BitstreamError(f"bits_per_code must be in [1, 16], got {self.bits_per_code}")
        if not 0 < self.n_stages < 256:
            raise BitstreamError("n_stages must fit in a u8 and be positive")
        if len(self.config_hash) != 8:
            raise BitstreamError("config_hash must be exactly 8 bytes")
        if self.frame_rate <= 0:
            raise BitstreamError("frame_rate must be positive")

    @property
    def payload_bytes(self) -> int:
        return math.ceil(self.frame_count * self.n_stages * self.bits_per_code / 8)

    def pack(self) -> bytes:
        fr = self.frame_rate
        return HEADER.pack(
            MAGIC, self.version, self.sample_rate, fr.numerator, fr.denominator,
            self.n_stages, self.bits_per_code, self.frame_count, bytes(self.config_hash),
        )


def pack_codes(values: np.ndarray, bits: int) -> bytes:
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if values.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1)
    bitmat = ((values[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1)).tobytes()


def unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if np.any(flat[count * bits :]):
        raise BitstreamError("non-zero padding bits at end of payload")
    bitmat = flat[: count * bits].reshape(count, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return bitmat @ weights


def serialize(
    tokens: TokenStream,
    sample_rate: int,
    frame_rate: Fraction | None = None,
    config_hash: bytes = bytes(8),
) -> bytes:
    """Header plus bit-packed payload for a single ``(T, n_stages)`` stream."""
    idx = np.asarray(tokens.indices)
    if idx.ndim != 2:
        raise BitstreamError("serialize takes one stream of shape (T, n_stages)")
    if idx.size and (idx.min() < 0 or idx.max() >= 2**tokens.bits):
        raise BitstreamError(f"code index does not fit in {tokens.bits} bits")
    if frame_rate is None:
        frame_rate = Fraction(tokens.frame_rate).limit_denominator(1 << 16)
    frame_rate = Fraction(frame_rate)
    if not math.isclose(float(frame_rate), float(tokens.frame_rate), rel_tol=1e-12):
        raise BitstreamError(f"frame_rate {frame_rate} disagrees with tokens ({tokens.frame_rate})")
    header = StreamHeader(
        int(sample_rate), frame_rate, tokens.n_stages, tokens.bits, idx.shape[0], bytes(config_hash)
    )
    return header.pack() + pack_codes(idx, tokens.bits)


def parse_header(data: bytes) -> StreamHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedError(HEADER.size, len(data))
    _, version, sr, num, den, n_stages, bits, frames, chash = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported stream version {version}, expected {VERSION}")
    if den == 0:
        raise BitstreamError("frame_rate denominator is zero")
    return StreamHeader(sr, Fraction(num, den), n_stages, bits, frames, chash, version)


def deserialize(data: bytes) -> tuple[TokenStream, StreamHeader]:
    data = bytes(data)
    header = parse_header(data)
    expected = HEADER.size + header.payload_bytes
    if len(data) < expected:
        raise TruncatedError(expected, len(data))
    if len(data) > expected:
        raise BitstreamError(f"{len(data) - expected} unexpected trailing bytes")
    codes = unpack_codes(data[HEADER.size :], header.frame_count * header.n_stages, header.bits_per_code)
    indices = codes.reshape(header.frame_count, header.n_stages)
    return TokenStream(indices, float(header.frame_rate), header.bits_per_code), header


# ---------------------------------------------------------------------------
# Bitrate accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitrateRow:
    frame_rate: Fraction
    tokens_per_s: Fraction
    bits_per_s: Fraction
    downsampling: int

    @property
    def kbits_per_s(self) -> Fraction:
        return self.bits_per_s / 1000

    def as_dict(self) -> dict:
        return {
            "frame_rate_hz": float(self.frame_rate),
            "tokens_per_s": float(self.tokens_per_s),
            "bits_per_s": float(self.bits_per_s),
            "kbits_per_s": float(self.kbits_per_s),
            "downsampling": self.downsampling,
        }


def frame_rate_of(sample_rate: int, strides) -> Fraction:
    hop = math.prod(int(s) for s in strides)
    if hop <= 0 or sample_rate <= 0:
        raise BitstreamError("sample_rate and strides must be positive")
    return Fraction(int(sample_rate), hop)


def bitrate(cfg, n_stages: int, bits: int = 9) -> BitrateRow:
    """Frame rate, token rate and bit rate for a model config.

    ``cfg`` needs ``sample_rate`` and ``strides`` attributes.
    """
    if n_stages < 1 or bits < 1:
        raise BitstreamError("n_stages and bits must be positive")
    fr = frame_rate_of(cfg.sample_rate, cfg.strides)
    tps = fr * n_stages
    return BitrateRow(fr, tps, tps * bits, math.prod(cfg.strides))
