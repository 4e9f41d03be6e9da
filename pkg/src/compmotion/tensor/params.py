"""Named parameter storage, AdamW, and the DMGC checkpoint container."""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .core import Tensor, get_default_dtype

CHECKPOINT_MAGIC = b"DMGC"
CHECKPOINT_VERSION = 1


class ParameterStore:
    """Dot-named parameters plus AdamW moment buffers and a step counter."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True, prefix: str = "") -> None:
        """Copy arrays into existing tensors in place (module references stay valid)."""
        for name, t in self.params.items():
            if not name.startswith(prefix):
                continue
            if name not in state:
                if strict:
                    raise KeyError(f"checkpoint is missing parameter {name!r}")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def save(self, path) -> str:
        data = encode_checkpoint(self.state())
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    def load(self, path, strict: bool = True, prefix: str = "") -> None:
        self.load_state(read_checkpoint(path), strict=strict, prefix=prefix)


def adamw_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
               weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, names=None) -> ParameterStore:
    """One decoupled-weight-decay Adam update, in place. Returns the store."""
    names = list(store.params) if names is None else list(names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"adamw_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name in names:
        p = store.params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = store.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = store.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        store.m[name], store.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        w = p.data
        if weight_decay:
            w = w * (1.0 - lr * weight_decay)
        p.data = (w - lr * update).astype(p.dtype)
    return store


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> OrderedDict[str, np.ndarray]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a DMGC checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = arr.astype(np.float32)
    return out


def read_checkpoint(path) -> OrderedDict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def write_checkpoint(path, state: dict[str, np.ndarray]) -> str:
    data = encode_checkpoint(state)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()
