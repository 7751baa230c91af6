"""Recurrent message construction over a sequence of crops."""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import CropPlan, with_global_first
from .quantizer import FsqSpec, LatentMessage, id_to_digits


@dataclass(frozen=True)
class EncodeRegimes:
    p_cfg: float = 0.18
    p_global: float = 0.55
    init_token_id: Optional[int] = None

    def __post_init__(self):
        for name in ("p_cfg", "p_global"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


def default_init_id(spec: FsqSpec) -> int:
    return spec.vocab_size // 2


def init_message(spec: FsqSpec, length: int, init_token_id: Optional[int] = None,
                 batch: Optional[int] = None, device=None) -> LatentMessage:
    token = default_init_id(spec) if init_token_id is None else int(init_token_id)
    id_to_digits(token, spec)  # range check
    shape = (length,) if batch is None else (batch, length)
    ids = torch.full(shape, token, dtype=torch.long, device=device)
    return LatentMessage.from_ids(ids, spec)


@dataclass
class EncodeResult:
    message: LatentMessage       # batched (B, L)
    plans: list                  # plans actually used (after any global substitution)
    dropped: torch.Tensor        # (B,) bool, True where the unconditional branch fired
    trace: Optional[list] = None  # messages after each step, detached

    @property
    def global_offsets(self) -> torch.Tensor:
        g = torch.tensor([p.global_offset for p in self.plans], dtype=torch.float32)
        g[self.dropped] = 0.0
        return g


def encode_step(model, crops: torch.Tensor, offsets, message: LatentMessage) -> LatentMessage:
    """One update ``m_k = Q(f^m(c_k, 1, a_k, sg[m_{k-1}]))`` for a batch of equally sized crops."""
    out = model(crops, 1.0, offsets, message.tokens.detach(), mode="encode")
    return LatentMessage.from_values(out.message_readout, model.config.fsq)


def encode_crops(model, crops: Sequence[torch.Tensor], offsets: Sequence, init: LatentMessage,
                 trace: Optional[list] = None) -> LatentMessage:
    """Run the loop over per-step crop batches; only the final update is differentiable."""
    msg = init
    last = len(crops) - 1
    for k, (c, a) in enumerate(zip(crops, offsets)):
        ctx = nullcontext() if k == last else torch.no_grad()
        with ctx:
            msg = encode_step(model, c, a, msg)
        if trace is not None:
            trace.append(msg.detach())
    return msg


def _step_batches(images: torch.Tensor, plans: Sequence[CropPlan], k: int):
    """Group the k-th crops of all images by size (global vs local)."""
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(plans):
        groups.setdefault(p.size(k), []).append(i)
    for size, idx in groups.items():
        crops = []
        for i in idx:
            x0, y0 = plans[i].top_left(k)
            crops.append(images[i, :, y0:y0 + size, x0:x0 + size])
        offs = torch.tensor([plans[i].offsets[k] for i in idx], dtype=torch.float32, device=images.device)
        yield idx, torch.stack(crops), offs


def _encode_plans(model, images, plans, init_token_id=None, trace=None) -> LatentMessage:
    spec = model.config.fsq
    L = model.config.message_length
    b = len(plans)
    msg = init_message(spec, L, init_token_id, batch=b, device=images.device)
    last = len(plans[0]) - 1
    for k in range(last + 1):
        ctx = nullcontext() if k == last else torch.no_grad()
        with ctx:
            parts, order = [], []
            for idx, crops, offs in _step_batches(images, plans, k):
                sub = LatentMessage(msg.tokens[idx], msg.ids[idx], spec)
                parts.append(encode_step(model, crops, offs, sub))
                order.extend(idx)
            inv = torch.empty(b, dtype=torch.long)
            inv[torch.tensor(order)] = torch.arange(b)
            tokens = torch.cat([m.tokens for m in parts])[inv]
            ids = torch.cat([m.ids for m in parts])[inv]
            msg = LatentMessage(tokens, ids, spec)
        if trace is not None:
            trace.append(msg.detach())
    return msg


def encode(model, images: torch.Tensor, plans: Sequence[CropPlan], regimes: Optional[EncodeRegimes] = None,
           training: bool = False, rng: Optional[np.random.Generator] = None,
           return_trace: bool = False) -> EncodeResult:
    """Encode a batch of images, one crop plan per image (all plans of equal length).

    With ``training`` set, each image independently has its first crop replaced
    by the full image with probability ``p_global`` and its message replaced by
    the initial one with probability ``p_cfg``. Encoding compute is skipped for
    dropped images.
    """
    plans = list(plans)
    if len(plans) != images.shape[0]:
        raise ValueError("one crop plan per image required")
    if len({len(p) for p in plans}) != 1:
        raise ValueError("all plans in a batch must have the same number of crops")
    cfg = model.config
    for p in plans:
        if p.image_size != images.shape[-1] or p.crop_size % cfg.patch_size or p.image_size > cfg.image_size:
            raise ValueError("crop plan geometry does not match the model's patch layout")
    regimes = regimes or EncodeRegimes()
    b = len(plans)
    dropped = torch.zeros(b, dtype=torch.bool)
    if training:
        if rng is None:
            raise ValueError("training mode needs a random generator")
        glob = rng.random(b) < regimes.p_global
        plans = [with_global_first(p) if (g and not p.has_global) else p for p, g in zip(plans, glob)]
        dropped = torch.from_numpy(rng.random(b) < regimes.p_cfg)

    init = init_message(cfg.fsq, cfg.message_length, regimes.init_token_id, batch=b, device=images.device)
    keep = (~dropped).nonzero().flatten().tolist()
    trace = [] if return_trace else None
    if not keep:
        return EncodeResult(init, plans, dropped, trace)
    enc = _encode_plans(model, images[keep], [plans[i] for i in keep], regimes.init_token_id, trace)
    if len(keep) == b:
        return EncodeResult(enc, plans, dropped, trace)
    tokens = init.tokens.clone().to(enc.tokens.dtype)
    ids = init.ids.clone()
    tokens[keep] = enc.tokens
    ids[keep] = enc.ids
    return EncodeResult(LatentMessage(tokens, ids, cfg.fsq), plans, dropped, trace)
