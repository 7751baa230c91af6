"""The shared speaker/listener transformer.

One token sequence ``[offset | message | buffer | image patches]`` goes through
a stack of DiT-style blocks. Image tokens and the remaining ("context") tokens
read their AdaLN shift/scale/gate from separate projections of the timestep
embedding. Buffer tokens are only present when encoding; they are a causal
scratchpad that the next message is read from, and no other token attends to
them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .quantizer import DESK_LEVELS, FULL_LEVELS, FsqSpec, LatentMessage, ids_to_values


@dataclass
class BackboneConfig:
    depth: int = 4
    hidden: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8
    image_size: int = 64
    channels: int = 3
    message_length: int = 16
    levels: tuple = DESK_LEVELS
    align_layer: int = 2
    # "x": the image head predicts the clean patch and velocity is (x_hat - x_t) / (1 - t);
    # "v": the head predicts velocity directly. Pixel patches wider than ``hidden`` need "x".
    prediction: str = "x"
    t_clip: float = 0.05   # floor on 1 - t when converting an x prediction to velocity

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        if self.prediction not in ("x", "v"):
            raise ValueError(f"unknown prediction target {self.prediction!r}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden % self.heads:
            raise ValueError("heads must divide hidden")
        if not 1 <= self.align_layer <= self.depth:
            raise ValueError("align_layer must lie in [1, depth]")
        FsqSpec(self.levels)

    @property
    def fsq(self) -> FsqSpec:
        return FsqSpec(self.levels)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    @classmethod
    def preset(cls, name: str) -> "BackboneConfig":
        presets = {
            "desk": cls(),
            # pixel-space stand-ins for the latent-space B / L / XL models
            "B": cls(12, 768, 12, 4.0, 16, 256, 3, 256, FULL_LEVELS, 4),
            "L": cls(24, 1024, 16, 4.0, 16, 256, 3, 256, FULL_LEVELS, 4),
            "XL": cls(28, 1152, 16, 4.0, 16, 256, 3, 256, FULL_LEVELS, 4),
        }
        return presets[name]


def sincos_grid(grid: int, dim: int) -> torch.Tensor:
    """2D sine-cosine table of shape (grid, grid, dim); first half encodes rows, second half columns."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4))
    pos = np.arange(grid, dtype=np.float64)
    ang = np.outer(pos, omega)
    one_d = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (grid, dim/2)
    rows = np.broadcast_to(one_d[:, None, :], (grid, grid, dim // 2))
    cols = np.broadcast_to(one_d[None, :, :], (grid, grid, dim // 2))
    return torch.from_numpy(np.concatenate([rows, cols], axis=-1)).float()


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, p: int, channels: int, gh: int, gw: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, gh, gw, channels, p, p)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, gh * p, gw * p)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        args = 1000 * t[:, None].float() * freqs[None]
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        inner = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(hidden, inner), nn.GELU(approximate="tanh"), nn.Linear(inner, hidden))
        self.mod_img = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        self.mod_ctx = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))

    def modulation(self, c: torch.Tensor, n_ctx: int, n_img: int):
        ctx = self.mod_ctx(c)[:, None].expand(-1, n_ctx, -1)
        img = self.mod_img(c)[:, None].expand(-1, n_img, -1)
        return torch.cat([ctx, img], dim=1).chunk(6, dim=-1)

    def attention_input(self, x, c, n_ctx):
        shift, scale, *_ = self.modulation(c, n_ctx, x.shape[1] - n_ctx)
        return self.norm1(x) * (1 + scale) + shift

    def attend(self, h, mask, capture):
        b, s, d = h.shape
        q, k, v = self.qkv(h).reshape(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if capture:
            scores = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
            attn = scores.masked_fill(~mask, float("-inf")).softmax(dim=-1)
            out = attn @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, s, d)), attn

    def forward(self, x, c, n_ctx, mask, capture=False):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(c, n_ctx, x.shape[1] - n_ctx)
        a, attn = self.attend(self.norm1(x) * (1 + scale1) + shift1, mask, capture)
        x = x + gate1 * a
        x = x + gate2 * self.mlp(self.norm2(x) * (1 + scale2) + shift2)
        return x, attn


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.linear = nn.Linear(hidden, out_dim)

    def forward(self, x, c):
        shift, scale = self.mod(c)[:, None].chunk(2, dim=-1)
        return self.linear(self.norm(x) * (1 + scale) + shift)


@dataclass
class ForwardOutput:
    velocity: Optional[torch.Tensor]          # (B, C, h, w), decode mode
    message_readout: Optional[torch.Tensor]   # (B, L, d) from buffer slots, encode mode
    tap_image: torch.Tensor                   # (B, P, hidden) after block align_layer
    tap_message: torch.Tensor                 # (B, L, hidden) message slots after block align_layer
    attention: Optional[list] = None          # per layer (B, heads, S, S)
    slices: dict = field(default_factory=dict)

    def message_to_image_attention(self, layer: int) -> torch.Tensor:
        """(B, heads, L, P) attention of message slots onto image patches at ``layer`` (0-indexed)."""
        a = self.attention[layer]
        return a[:, :, self.slices["message"], self.slices["image"]]


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        cfg = config
        d, hid = cfg.fsq.token_dim, cfg.hidden
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.t_embed = TimestepEmbedder(hid)
        self.img_embed = nn.Linear(patch_dim, hid)
        self.register_buffer("pos_grid", sincos_grid(cfg.grid, hid), persistent=False)
        self.offset_embed = nn.Linear(2, hid)
        self.offset_pos = nn.Parameter(torch.zeros(1, 1, hid))
        self.msg_embed = nn.Sequential(nn.Linear(d, hid), nn.SiLU(), nn.Linear(hid, hid))
        self.slot_pos = nn.Parameter(torch.zeros(1, cfg.message_length, hid))
        self.buffer_token = nn.Parameter(torch.zeros(1, 1, hid))
        self.blocks = nn.ModuleList([Block(hid, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.final_img = FinalLayer(hid, patch_dim)
        self.final_msg = FinalLayer(hid, d)
        self._masks: dict = {}
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for p in (self.offset_pos, self.slot_pos, self.buffer_token):
            nn.init.normal_(p, std=0.02)
        nn.init.normal_(self.t_embed.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embed.mlp[2].weight, std=0.02)
        for blk in self.blocks:
            for mod in (blk.mod_img, blk.mod_ctx):
                nn.init.zeros_(mod[-1].weight)
                nn.init.zeros_(mod[-1].bias)
        for fl in (self.final_img, self.final_msg):
            nn.init.zeros_(fl.mod[-1].weight)
            nn.init.zeros_(fl.mod[-1].bias)
        nn.init.zeros_(self.final_img.linear.weight)
        nn.init.normal_(self.final_msg.linear.weight, std=0.02)

    # -- embeddings ---------------------------------------------------------

    def positional_grid(self, extent: tuple[int, int]) -> torch.Tensor:
        gh, gw = extent
        if gh > self.config.grid or gw > self.config.grid:
            raise ValueError(f"crop extent {extent} exceeds the {self.config.grid}x{self.config.grid} grid")
        return self.pos_grid[:gh, :gw].reshape(gh * gw, -1)

    def embed_codes(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.shape[-2] != self.config.message_length:
            raise ValueError(f"message length {codes.shape[-2]} != {self.config.message_length}")
        return self.msg_embed(codes) + self.slot_pos

    def embed_message(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed_codes(ids_to_values(ids, self.config.fsq, dtype=self.slot_pos.dtype))

    def attention_mask(self, n_msg: int, n_buf: int, n_img: int) -> torch.Tensor:
        key = (n_msg, n_buf, n_img)
        if key not in self._masks:
            s = 1 + n_msg + n_buf + n_img
            m = torch.ones(s, s, dtype=torch.bool)
            b0, b1 = 1 + n_msg, 1 + n_msg + n_buf
            m[:, b0:b1] = False
            m[b0:b1, b0:b1] = torch.tril(torch.ones(n_buf, n_buf, dtype=torch.bool))
            self._masks[key] = m
        return self._masks[key].to(self.pos_grid.device)

    # -- forward ------------------------------------------------------------

    def forward(self, image, t=None, offset=None, message=None, mode: str = "encode",
                capture_attention: bool = False) -> ForwardOutput:
        cfg = self.config
        if mode not in ("encode", "decode"):
            raise ValueError(f"unknown mode {mode!r}")
        b, _, h, w = image.shape
        p = cfg.patch_size
        gh, gw = h // p, w // p
        dev = image.device
        if t is None:
            t = 1.0
        t = torch.as_tensor(t, dtype=torch.float32, device=dev)
        if t.ndim == 0:
            t = t.expand(b)
        if (t < 0).any() or (t > 1).any():
            raise ValueError("t must lie in [0, 1]")
        offset = torch.zeros(b, 2, device=dev) if offset is None else torch.as_tensor(offset, dtype=torch.float32, device=dev)
        if offset.ndim == 1:
            offset = offset.expand(b, 2)
        if isinstance(message, LatentMessage):
            message = message.tokens
        if message.ndim == 2:
            message = message.expand(b, -1, -1)
        msg = self.embed_codes(message.to(self.slot_pos.dtype))
        L = cfg.message_length

        img = self.img_embed(patchify(image, p)) + self.positional_grid((gh, gw))
        off = self.offset_embed(offset)[:, None] + self.offset_pos
        parts = [off, msg]
        n_buf = 0
        if mode == "encode":
            n_buf = L
            parts.append((self.buffer_token + self.slot_pos).expand(b, -1, -1))
        parts.append(img)
        x = torch.cat(parts, dim=1)
        n_ctx = 1 + L + n_buf
        n_img = gh * gw
        mask = self.attention_mask(L, n_buf, n_img)
        c = self.t_embed(t)

        slices = {"offset": slice(0, 1), "message": slice(1, 1 + L),
                  "buffer": slice(1 + L, 1 + L + n_buf), "image": slice(n_ctx, n_ctx + n_img)}
        attn_maps = [] if capture_attention else None
        tap = None
        for i, blk in enumerate(self.blocks):
            x, a = blk(x, c, n_ctx, mask, capture_attention)
            if capture_attention:
                attn_maps.append(a)
            if i + 1 == cfg.align_layer:
                tap = x

        velocity = readout = None
        if mode == "decode":
            out = unpatchify(self.final_img(x[:, slices["image"]], c), p, cfg.channels, gh, gw)
            if cfg.prediction == "x":
                out = (out - image) / (1 - t).clamp_min(cfg.t_clip)[:, None, None, None]
            velocity = out
        else:
            readout = self.final_msg(x[:, slices["buffer"]], c)
        return ForwardOutput(velocity, readout, tap[:, slices["image"]], tap[:, slices["message"]],
                             attn_maps, slices)
