"""Inspection tools: message-to-image attention maps, retrieval, and per-crop reconstructions."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .flow import GuidanceConfig, decode, draw_flow_sample
from .geometry import CropPlan
from .quantizer import FsqSpec, LatentMessage, ids_to_values


@dataclass(frozen=True)
class AttnAnalysisConfig:
    layer: Optional[int] = None   # 1-indexed; None picks the penultimate layer
    denoise_t: float = 0.1
    threshold_q: float = 30.0     # percent of patches kept when thresholding
    head_reduce: str = "mean"     # "mean" or "max"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold_q <= 100:
            raise ValueError("threshold_q must lie in (0, 100]")
        if self.head_reduce not in ("mean", "max"):
            raise ValueError(f"unknown head reduction {self.head_reduce!r}")

    def resolve_layer(self, depth: int) -> int:
        layer = depth - 1 if self.layer is None else self.layer
        if not 1 <= layer <= depth:
            raise ValueError(f"layer {layer} outside 1..{depth}")
        return layer


@torch.no_grad()
def token_attention_maps(model, images: torch.Tensor, message: LatentMessage, global_offset=None,
                         config: AttnAnalysisConfig = AttnAnalysisConfig()) -> torch.Tensor:
    """Head-averaged attention of each message slot onto the image patches, shape (B, L, g, g)."""
    mcfg = model.config
    if images.ndim == 3:
        images = images[None]
    tokens = message.tokens if message.tokens.ndim == 3 else message.tokens[None]
    b = images.shape[0]
    if global_offset is None:
        global_offset = torch.zeros(b, 2)
    gen = torch.Generator().manual_seed(config.seed)
    sample = draw_flow_sample(images, gen, t=config.denoise_t)
    out = model(sample.x_t, sample.t, global_offset, tokens, mode="decode", capture_attention=True)
    a = out.message_to_image_attention(config.resolve_layer(mcfg.depth) - 1)
    a = a.mean(1) if config.head_reduce == "mean" else a.amax(1)
    return a.reshape(b, mcfg.message_length, mcfg.grid, mcfg.grid)


def top_cells(attn: np.ndarray, quantile: float) -> np.ndarray:
    """Boolean mask of the ``ceil(q P / 100)`` highest cells; equal values keep raster order."""
    if not 0 < quantile <= 100:
        raise ValueError("quantile must lie in (0, 100]")
    flat = np.asarray(attn, dtype=np.float64).ravel()
    n = math.ceil(quantile * flat.size / 100)
    keep = np.argsort(-flat, kind="stable")[:n]
    mask = np.zeros(flat.size, dtype=bool)
    mask[keep] = True
    return mask.reshape(np.shape(attn))


def threshold_iou(attn: np.ndarray, gt: np.ndarray, quantile: float = 30.0) -> float:
    pred = top_cells(attn, quantile)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"map shape {pred.shape} != mask shape {gt.shape}")
    if not gt.any():
        warnings.warn("empty ground-truth mask; IoU set to 0")
        return 0.0
    return float((pred & gt).sum() / (pred | gt).sum())


def best_token_iou(maps: np.ndarray, gt: np.ndarray, quantile: float = 30.0) -> tuple[float, int]:
    """IoU of the best-matching slot for one image; ``maps`` is (L, g, g)."""
    ious = [threshold_iou(m, gt, quantile) for m in maps]
    k = int(np.argmax(ious))
    return ious[k], k


def miou_best_token(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], quantile: float = 30.0):
    """Mean over images of the best-slot IoU. Returns ``(miou, [(iou, slot), ...])``."""
    per = [best_token_iou(np.asarray(m), g, quantile) for m, g in zip(maps, masks)]
    if not per:
        raise ValueError("no images to score")
    return float(np.mean([p[0] for p in per])), per


# -- retrieval ----------------------------------------------------------------

def message_vectors(ids, spec: FsqSpec) -> torch.Tensor:
    """Concatenate the dequantized slot vectors of each message: (..., L) ids to (..., L*d)."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    v = ids_to_values(ids, spec)
    return v.reshape(*ids.shape[:-1], -1)


def nearest_neighbors(query_ids, gallery_ids, spec: FsqSpec, k: int = 5):
    """Cosine top-k over concatenated token vectors. Returns ``(indices, similarities)``."""
    g = torch.nn.functional.normalize(message_vectors(gallery_ids, spec), dim=-1)
    q = message_vectors(query_ids, spec)
    single = q.ndim == 1
    q = torch.nn.functional.normalize(q.reshape(-1, g.shape[-1]), dim=-1)
    if k > g.shape[0]:
        raise ValueError(f"k={k} exceeds gallery size {g.shape[0]}")
    sims = q @ g.T
    top = torch.topk(sims, k, dim=-1)
    idx, val = top.indices.numpy(), top.values.numpy()
    return (idx[0], val[0]) if single else (idx, val)


# -- reconstructions ------------------------------------------------------------

def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] to (H, W, 3) uint8."""
    x = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).cpu().numpy()


def psnr(recon: torch.Tensor, target: torch.Tensor) -> float:
    """PSNR in dB for images in [-1, 1], averaged over the batch."""
    mse = (((recon.clamp(-1, 1) - target) / 2) ** 2).flatten(1).mean(1)
    return float((10 * torch.log10(1 / mse.clamp_min(1e-12))).mean())


@torch.no_grad()
def uncertainty_panel(model, image: torch.Tensor, trace: Sequence[LatentMessage], plan: CropPlan,
                      seed: int = 0, preview: GuidanceConfig = GuidanceConfig(weight=1.0, nfe=1),
                      final: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Strip of ``K + 2`` panels: the input, a quick decode after every crop, and a full decode."""
    if not trace:
        raise ValueError("empty policy trace")
    if len(trace) != len(plan):
        raise ValueError(f"trace has {len(trace)} messages for a {len(plan)}-crop plan")
    centers = plan.reconstruct_centers()
    panels = [to_uint8(image)]
    for msg, c in zip(trace, centers):
        gen = torch.Generator().manual_seed(seed)
        panels.append(to_uint8(decode(model, msg, preview, gen, global_offset=[-c[0], -c[1]])[0]))
    gen = torch.Generator().manual_seed(seed)
    panels.append(to_uint8(decode(model, trace[-1], final, gen, global_offset=list(plan.global_offset))[0]))
    return np.concatenate(panels, axis=1)
