"""Minimal dense tensors with reverse-mode autodiff (numpy backed)."""
from .core import *  # noqa: F401,F403
from .core import __all__ as _core_all
from .core import sum_all
from .gradcheck import grad_check
from .params import (
    ParameterStore,
    adamw_step,
    clip_grad_norm,
    decode_checkpoint,
    encode_checkpoint,
    read_checkpoint,
    write_checkpoint,
)

__all__ = list(_core_all) + [
    "sum_all", "grad_check", "ParameterStore", "adamw_step", "clip_grad_norm",
    "encode_checkpoint", "decode_checkpoint", "read_checkpoint", "write_checkpoint",
]
