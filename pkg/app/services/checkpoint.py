"""
MSVIT1 checkpoint codec.

Layout: the magic line ``MSVIT1\\n`` followed by one record per state entry,
ordered by name: u32 name length, name bytes (UTF-8), u32 dim count, u32 dims,
then the values as little-endian float64. Integers are little-endian.
"""

import logging
import struct
from pathlib import Path
from typing import Dict

import numpy as np
import torch
import torch.nn as nn

from ..errors import CheckpointError, CheckpointMismatchError

MAGIC = b"MSVIT1\n"

logger = logging.getLogger(__name__)


def encode_state(state: Dict[str, torch.Tensor]) -> bytes:
    chunks = [MAGIC]
    for name in sorted(state):
        tensor = state[name].detach().cpu()
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        chunks.append(tensor.to(torch.float64).numpy().astype("<f8").tobytes())
    return b"".join(chunks)


def decode_state(blob: bytes) -> Dict[str, torch.Tensor]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an MSVIT1 checkpoint (bad magic)")
    offset = len(MAGIC)
    state = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        state[name] = torch.from_numpy(values.copy())
    return state


def save_checkpoint(module: nn.Module, path: Path) -> Path:
    return save_state(module.state_dict(), path)


def load_state_into(module: nn.Module, state: Dict[str, torch.Tensor]) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointMismatchError(
            f"checkpoint entries do not match the model (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, target in expected.items():
        if tuple(state[name].shape) != tuple(target.shape):
            raise CheckpointMismatchError(
                f"{name}: checkpoint shape {tuple(state[name].shape)} vs model shape {tuple(target.shape)}"
            )
    module.load_state_dict(
        {name: value.to(expected[name].dtype) for name, value in state.items()}
    )


def load_checkpoint(module: nn.Module, path: Path) -> nn.Module:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    load_state_into(module, decode_state(path.read_bytes()))
    logger.info(f"Loaded checkpoint {path}")
    return module


def save_state(state: Dict[str, torch.Tensor], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_state(state))
    logger.info(f"Saved checkpoint {path}")
    return path
