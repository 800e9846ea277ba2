"""``.mfae`` checkpoint files: model config, f32 tensors and an embedded quantizer.

Layout (little-endian)::

    4s   magic "MFAE"
    u16  version = 1
    u32  config text length, then UTF-8 ``key=value`` lines
    u32  tensor count
    per tensor, in declaration order:
        u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f32 data
    u32  quantizer blob length, then the ``.mbsq`` bytes
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..quantizer import QuantizerStack, quantizer_from_bytes, quantizer_to_bytes
from .model import Codec, ModelConfig

MAGIC = b"MFAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_to_bytes(model: Codec, q: QuantizerStack) -> bytes:
    out = bytearray(MAGIC + struct.pack("<H", VERSION))
    cfg = model.cfg.to_text().encode()
    out += struct.pack("<I", len(cfg)) + cfg
    tensors = list(model.named_parameters())
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    qb = quantizer_to_bytes(q)
    out += struct.pack("<I", len(qb)) + qb
    return bytes(out)


def checkpoint_from_bytes(data: bytes, dtype=np.float32) -> tuple[Codec, QuantizerStack]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {pos + n} bytes, have {len(view)}")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not an MFAE checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig.from_text(take(n_cfg).decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"bad model config block: {exc}") from exc
    (n_tensors,) = struct.unpack("<I", take(4))
    values = {}
    for _ in range(n_tensors):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        values[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
    (n_q,) = struct.unpack("<I", take(4))
    q = quantizer_from_bytes(take(n_q))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    model = Codec(cfg, dtype=dtype)
    try:
        model.parameters.load(values)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    if q.dim != cfg.latent_dim:
        raise CheckpointError(f"quantizer dim {q.dim} does not match latent_dim {cfg.latent_dim}")
    return model, q


def save_checkpoint(path, model: Codec, q: QuantizerStack) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, q))


def load_checkpoint(path, dtype=np.float32) -> tuple[Codec, QuantizerStack]:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)


def config_digest(model: Codec, q: QuantizerStack) -> bytes:
    """First 6 bytes of SHA-256 over the serialized checkpoint.

    Any change to config, weights or codebooks changes the digest, so a token
    stream can only be decoded by the checkpoint that produced it.
    """
    return hashlib.sha256(checkpoint_to_bytes(model, q)).digest()[:6]
