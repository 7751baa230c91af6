"""Finite scalar quantization of message tokens.

Channel ``i`` with ``L_i`` levels is snapped to the grid
``-1 + 2k / (L_i - 1)``, ``k = 0 .. L_i - 1``. Before snapping, values pass
through a squash that is the identity on [-1, 1] and saturates with a tanh
tail onto the open range ``(-1 - h_i, 1 + h_i)``, ``h_i`` being half a grid
step. Grid points are therefore fixed points and every digit stays reachable.
Exact midpoints round towards the lower digit, so an input of 0 on an
even-level channel lands on the lower central digit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

FULL_LEVELS = (8, 8, 8, 5, 5, 5)
DESK_LEVELS = (8, 8, 5, 5)

DUMP_MAGIC = b"COMT"
DUMP_VERSION = 1


@dataclass(frozen=True)
class FsqSpec:
    levels: tuple[int, ...] = DESK_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if not self.levels or any(l < 2 for l in self.levels):
            raise ValueError(f"every FSQ level count must be >= 2, got {self.levels}")

    @property
    def token_dim(self) -> int:
        return len(self.levels)

    @property
    def vocab_size(self) -> int:
        return math.prod(self.levels)

    @property
    def basis(self) -> tuple[int, ...]:
        out, acc = [], 1
        for l in self.levels:
            out.append(acc)
            acc *= l
        return tuple(out)

    def _levels_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.tensor(self.levels, dtype=like.dtype if like.is_floating_point() else torch.float64,
                            device=like.device)


def bound(v: torch.Tensor, spec: FsqSpec) -> torch.Tensor:
    levels = spec._levels_tensor(v)
    h = 1.0 / (levels - 1)
    upper = 1 + h * torch.tanh((v - 1) / h)
    lower = -1 + h * torch.tanh((v + 1) / h)
    return torch.where(v > 1, upper, torch.where(v < -1, lower, v))


def _snap(b: torch.Tensor, spec: FsqSpec) -> torch.Tensor:
    levels = spec._levels_tensor(b)
    u = (b + 1) * (levels - 1) / 2
    digits = torch.ceil(u - 0.5)
    return torch.minimum(torch.clamp(digits, min=0), levels - 1).long()


def dequantize(digits: torch.Tensor, spec: FsqSpec, dtype=torch.float32) -> torch.Tensor:
    levels = torch.tensor(spec.levels, dtype=dtype, device=digits.device)
    return -1 + 2 * digits.to(dtype) / (levels - 1)


def quantize(v: torch.Tensor, spec: FsqSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Snap the last axis of ``v`` onto the grid. Returns ``(values, digits)``."""
    if v.shape[-1] != spec.token_dim:
        raise ValueError(f"expected trailing dim {spec.token_dim}, got {tuple(v.shape)}")
    if torch.isnan(v).any():
        raise ValueError("NaN in quantizer input")
    digits = _snap(bound(v, spec), spec)
    return dequantize(digits, spec, dtype=v.dtype), digits


def straight_through(v: torch.Tensor, spec: FsqSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantize with gradients of the squash; the rounding step acts as identity."""
    b = bound(v, spec)
    values, digits = quantize(v, spec)
    return b + (values - b).detach(), digits


def digits_to_id(digits, spec: FsqSpec):
    """Mixed-radix index, first channel least significant."""
    if isinstance(digits, torch.Tensor):
        levels = torch.tensor(spec.levels, device=digits.device)
        if ((digits < 0) | (digits >= levels)).any():
            raise ValueError("digit out of range")
        basis = torch.tensor(spec.basis, dtype=torch.long, device=digits.device)
        return (digits.long() * basis).sum(-1)
    digits = list(digits)
    if len(digits) != spec.token_dim:
        raise ValueError(f"expected {spec.token_dim} digits, got {len(digits)}")
    for d, l in zip(digits, spec.levels):
        if not 0 <= d < l:
            raise ValueError(f"digit {d} out of range for {l} levels")
    return sum(int(d) * b for d, b in zip(digits, spec.basis))


def id_to_digits(ids, spec: FsqSpec):
    if isinstance(ids, torch.Tensor):
        if ((ids < 0) | (ids >= spec.vocab_size)).any():
            raise ValueError("token id out of vocabulary")
        levels = torch.tensor(spec.levels, dtype=torch.long, device=ids.device)
        basis = torch.tensor(spec.basis, dtype=torch.long, device=ids.device)
        return (ids.long().unsqueeze(-1) // basis) % levels
    ids = int(ids)
    if not 0 <= ids < spec.vocab_size:
        raise ValueError(f"token id {ids} out of vocabulary of size {spec.vocab_size}")
    return tuple((ids // b) % l for b, l in zip(spec.basis, spec.levels))


def ids_to_values(ids: torch.Tensor, spec: FsqSpec, dtype=torch.float32) -> torch.Tensor:
    return dequantize(id_to_digits(ids, spec), spec, dtype=dtype)


@dataclass
class LatentMessage:
    """A (possibly batched) message: ``tokens`` is (..., L, d) on the grid, ``ids`` is (..., L)."""

    tokens: torch.Tensor
    ids: torch.Tensor
    spec: FsqSpec

    @property
    def length(self) -> int:
        return self.ids.shape[-1]

    @classmethod
    def from_ids(cls, ids: torch.Tensor, spec: FsqSpec) -> "LatentMessage":
        return cls(ids_to_values(ids, spec), ids.long(), spec)

    @classmethod
    def from_values(cls, values: torch.Tensor, spec: FsqSpec) -> "LatentMessage":
        """Quantize raw readouts; ``tokens`` keeps the straight-through graph."""
        tokens, digits = straight_through(values, spec)
        return cls(tokens, digits_to_id(digits, spec), spec)

    def detach(self) -> "LatentMessage":
        return LatentMessage(self.tokens.detach(), self.ids, self.spec)

    def __getitem__(self, idx) -> "LatentMessage":
        return LatentMessage(self.tokens[idx], self.ids[idx], self.spec)


def write_message_dump(path, ids: Sequence[int], vocab_size: int, version: int = DUMP_VERSION) -> None:
    ids = np.asarray(ids, dtype="<u4").ravel()
    if ids.size and int(ids.max()) >= vocab_size:
        raise ValueError("token id out of vocabulary")
    header = DUMP_MAGIC + struct.pack("<III", version, ids.size, vocab_size)
    Path(path).write_bytes(header + ids.tobytes())


def read_message_dump(path) -> tuple[np.ndarray, int]:
    """Returns ``(ids, vocab_size)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a COMT message dump")
    version, length, vocab = struct.unpack("<III", raw[4:16])
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    ids = np.frombuffer(raw[16:], dtype="<u4")
    if ids.size != length:
        raise ValueError(f"{path}: expected {length} ids, found {ids.size}")
    return ids.astype(np.int64), vocab
