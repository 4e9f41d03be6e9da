"""DMG1 motion container: magic, u32 count, u32 L, u32 d_m, then little-endian f32 frames."""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

DMG1_MAGIC = b"DMG1"


def encode_dmg1(motions: np.ndarray) -> bytes:
    m = np.asarray(motions)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"expected (count, L, d_m) motions, got shape {m.shape}")
    header = DMG1_MAGIC + struct.pack("<III", *m.shape)
    return header + np.ascontiguousarray(m, dtype="<f4").tobytes()


def decode_dmg1(data: bytes) -> np.ndarray:
    if data[:4] != DMG1_MAGIC:
        raise ValueError("not a DMG1 file (bad magic)")
    count, length, dims = struct.unpack_from("<III", data, 4)
    n = count * length * dims
    if len(data) != 16 + 4 * n:
        raise ValueError(f"DMG1 payload size mismatch: {len(data) - 16} bytes for {n} floats")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(count, length, dims).astype(np.float32)


def write_dmg1(path, motions: np.ndarray) -> str:
    data = encode_dmg1(motions)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_dmg1(path) -> np.ndarray:
    return decode_dmg1(Path(path).read_bytes())
