"""Flow matching along linear paths ``x_t = t x + (1 - t) eps`` and guided Euler decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .encoder import init_message
from .quantizer import LatentMessage

LOGIT_MEAN = -1.0
LOGIT_STD = 1.0


def sample_timestep(generator: torch.Generator, n: int = 1, mean: float = LOGIT_MEAN,
                    std: float = LOGIT_STD) -> torch.Tensor:
    """Logit-normal times, skewed towards the noise end."""
    z = torch.randn(n, generator=generator)
    return torch.sigmoid(mean + std * z)


@dataclass
class FlowSample:
    x: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor  # (B,)

    @property
    def x_t(self) -> torch.Tensor:
        t = self.t.view(-1, *([1] * (self.x.ndim - 1)))
        return t * self.x + (1 - t) * self.eps

    @property
    def target(self) -> torch.Tensor:
        return self.x - self.eps


def draw_flow_sample(x: torch.Tensor, generator: torch.Generator, t=None, eps=None) -> FlowSample:
    if t is None:
        t = sample_timestep(generator, x.shape[0])
    if eps is None:
        eps = torch.randn(x.shape, generator=generator)
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    return FlowSample(x, eps.to(x.dtype), t)


def flow_forward(model, x, message, global_offset, generator=None, t=None, eps=None,
                 capture_attention=False):
    """Decode-mode forward on a fresh interpolant. Returns ``(loss, output, sample)``."""
    sample = draw_flow_sample(x, generator, t, eps)
    out = model(sample.x_t, sample.t, global_offset, message, mode="decode",
                capture_attention=capture_attention)
    if out.velocity.shape != sample.target.shape:
        raise ValueError(f"velocity shape {tuple(out.velocity.shape)} != target {tuple(sample.target.shape)}")
    loss = ((out.velocity - sample.target) ** 2).mean()
    return loss, out, sample


def fm_loss(model, x, message, global_offset, generator=None, t=None, eps=None) -> torch.Tensor:
    return flow_forward(model, x, message, global_offset, generator, t, eps)[0]


@dataclass(frozen=True)
class GuidanceConfig:
    weight: float = 7.5
    rescale_threshold: float = 2.5
    parallel_keep: float = 0.0
    momentum: float = -0.5
    nfe: int = 10

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")

    @property
    def step(self) -> float:
        return 1.0 / self.nfe


class MomentumState:
    """Per-trajectory memory of the previous raw guidance direction."""

    def __init__(self):
        self.prev: Optional[torch.Tensor] = None


def apg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, cfg: GuidanceConfig,
                 state: MomentumState) -> torch.Tensor:
    if cfg.weight == 1.0:
        return v_cond
    dims = tuple(range(1, v_cond.ndim))
    d_raw = v_cond - v_uncond
    d = d_raw if state.prev is None else d_raw + cfg.momentum * state.prev
    state.prev = d_raw
    norm = torch.linalg.vector_norm(d, dim=dims, keepdim=True)
    d = torch.where(norm > cfg.rescale_threshold, d * cfg.rescale_threshold / norm.clamp_min(1e-30), d)
    c_norm = torch.linalg.vector_norm(v_cond, dim=dims, keepdim=True)
    unit = torch.where(c_norm > 0, v_cond / c_norm.clamp_min(1e-30), torch.zeros_like(v_cond))
    parallel = (d * unit).sum(dim=dims, keepdim=True) * unit
    orthogonal = d - parallel
    return v_cond + (cfg.weight - 1) * (cfg.parallel_keep * parallel + orthogonal)


@torch.no_grad()
def decode(model, message: LatentMessage, cfg: GuidanceConfig = GuidanceConfig(),
           generator: Optional[torch.Generator] = None, global_offset=None,
           capture_intermediate: bool = False, init_token_id: Optional[int] = None,
           x0: Optional[torch.Tensor] = None):
    """Integrate the guided flow ODE from noise with ``cfg.nfe`` Euler steps.

    ``capture_intermediate`` additionally returns the one-step clean estimate
    ``x_t + (1 - t) v`` seen at every step.
    """
    mcfg = model.config
    tokens = message.tokens if isinstance(message, LatentMessage) else message
    if tokens.ndim == 2:
        tokens = tokens[None]
    b = tokens.shape[0]
    shape = (b, mcfg.channels, mcfg.image_size, mcfg.image_size)
    x = torch.randn(shape, generator=generator) if x0 is None else x0.clone()
    if global_offset is None:
        global_offset = torch.zeros(b, 2)
    global_offset = torch.as_tensor(global_offset, dtype=torch.float32).expand(b, 2)
    uncond = init_message(mcfg.fsq, mcfg.message_length, init_token_id, batch=b).tokens
    zero = torch.zeros(b, 2)
    state = MomentumState()
    h = cfg.step
    previews = []
    for i in range(cfg.nfe):
        t = torch.full((b,), i * h)
        v = model(x, t, global_offset, tokens, mode="decode").velocity
        if cfg.weight != 1.0:
            v_u = model(x, t, zero, uncond, mode="decode").velocity
            v = apg_velocity(v, v_u, cfg, state)
        if capture_intermediate:
            previews.append(x + (1 - i * h) * v)
        x = x + h * v
    return (x, previews) if capture_intermediate else x
