"""Inference-time cropping policies: global-only, random, raster-scan and adaptive."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .encoder import encode, encode_step, init_message
from .flow import GuidanceConfig, decode
from .geometry import CropBoundsError, Point, build_plan, normalized_center, top_left_from_center
from .quantizer import LatentMessage

KINDS = ("global", "random", "raster", "adaptive")


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "global"
    with_global: bool = True
    n_local: Optional[int] = None   # defaults to every grid cell (3 for adaptive)
    grid: int = 3
    crop_size: int = 24
    preview_nfe: int = 1
    preview_cfg: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy {self.kind!r}; choose from {KINDS}")
        if self.n_local is not None and self.n_local > self.grid ** 2:
            raise ValueError(f"n_local={self.n_local} exceeds the {self.grid}x{self.grid} grid")

    @property
    def locals(self) -> int:
        if self.kind == "global":
            return 0
        if self.n_local is not None:
            return self.n_local
        return 3 if self.kind == "adaptive" else self.grid ** 2


def raster_centers(grid: int, image_size: int, crop_size: int) -> list[Point]:
    """Grid cell centers, left to right then top to bottom."""
    if crop_size > image_size or grid < 1:
        raise CropBoundsError(f"{crop_size}px crops do not fit a {image_size}px image")
    span = image_size - crop_size
    tls = [0] if grid == 1 else [round(i * span / (grid - 1)) for i in range(grid)]
    return [normalized_center((x, y), crop_size, image_size) for y in tls for x in tls]


def window_means(error: np.ndarray, centers: Sequence[Point], crop_size: int) -> np.ndarray:
    size = error.shape[-1]
    out = np.empty(len(centers))
    for i, c in enumerate(centers):
        x0, y0 = top_left_from_center(c, crop_size, size)
        out[i] = error[y0:y0 + crop_size, x0:x0 + crop_size].mean()
    return out


def argmax_window(error: np.ndarray, centers: Sequence[Point], crop_size: int) -> int:
    """Index of the window with the largest mean error; ties go to the earliest candidate."""
    return int(np.argmax(window_means(error, centers, crop_size)))


def adaptive_next(image: torch.Tensor, message: LatentMessage, candidates: Sequence[Point],
                  decoder: Callable[[LatentMessage], torch.Tensor], crop_size: int) -> Point:
    """Decode ``message`` and return the candidate crop with the largest mean squared error.

    ``candidates`` must be in raster order for the tie rule to pick the lowest raster index.
    """
    recon = decoder(message)
    err = ((recon.reshape(image.shape) - image) ** 2).mean(0).cpu().numpy()
    return candidates[argmax_window(err, candidates, crop_size)]


@dataclass
class PolicyResult:
    message: LatentMessage           # final message, unbatched (L,)
    plan: object                     # CropPlan
    trace: list = field(default_factory=list)     # message after each crop
    previews: list = field(default_factory=list)  # one-step reconstructions after each crop


def _preview(model, message, global_offset, spec: PolicySpec, generator):
    cfg = GuidanceConfig(weight=spec.preview_cfg, nfe=spec.preview_nfe)
    return decode(model, message, cfg, generator, global_offset=torch.tensor(global_offset)[None])[0]


@torch.no_grad()
def run_policy(image: torch.Tensor, spec: PolicySpec, model, seed: int = 0,
               previews: bool = False) -> PolicyResult:
    """Encode one (3, H, W) image following ``spec``; no training regimes are applied."""
    mcfg = model.config
    size = image.shape[-1]
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    cells = raster_centers(spec.grid, size, spec.crop_size)
    n_local = spec.locals
    with_global = spec.with_global or spec.kind == "global"

    if spec.kind == "raster":
        local_order = cells[:n_local]
    elif spec.kind == "random":
        local_order = [cells[i] for i in rng.permutation(len(cells))[:n_local]]
    else:
        local_order = None  # chosen on the fly (adaptive) or unused (global)

    msg = init_message(mcfg.fsq, mcfg.message_length, batch=1)
    centers: list[Point] = []
    result = PolicyResult(msg[0], None)

    def step(center, crop_size):
        nonlocal msg
        x0, y0 = top_left_from_center(center, crop_size, size)
        crop = image[None, :, y0:y0 + crop_size, x0:x0 + crop_size]
        prev = centers[-1] if centers else None
        offset = (0.0, 0.0) if prev is None else (center[0] - prev[0], center[1] - prev[1])
        msg = encode_step(model, crop, torch.tensor([offset]), msg)
        centers.append(center)
        result.trace.append(msg[0])
        if previews or spec.kind == "adaptive":
            p = _preview(model, msg, (-center[0], -center[1]), spec, gen)
            result.previews.append(p)

    if with_global:
        step((0.0, 0.0), size)
    if spec.kind == "adaptive":
        remaining = list(cells)
        for _ in range(n_local):
            if result.previews:
                recon = result.previews[-1]
                decoder = lambda m, r=recon: r
            else:
                decoder = lambda m: _preview(model, m, (0.0, 0.0), spec, gen)
            c = adaptive_next(image, msg, remaining, decoder, spec.crop_size)
            remaining.remove(c)
            step(c, spec.crop_size)
    elif local_order:
        for c in local_order:
            step(c, spec.crop_size)

    result.message = msg[0]
    result.plan = build_plan(centers, with_global, spec.crop_size, size)
    return result


@torch.no_grad()
def encode_global(model, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Token ids (N, L) of single global-crop encodings; ``images`` is (N, 3, H, W) in [-1, 1]."""
    plan = build_plan([(0.0, 0.0)], True, model.config.patch_size, images.shape[-1])
    out = []
    for i in range(0, images.shape[0], batch_size):
        x = images[i:i + batch_size]
        out.append(encode(model, x, [plan] * x.shape[0]).message.ids)
    return torch.cat(out)
