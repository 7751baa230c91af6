"""Training loop: randomized crop counts, flow matching + alignment losses, EMA, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .align import AlignmentHeads, TeacherTable, repa_loss, srepa_loss
from .encoder import EncodeRegimes, encode
from .flow import flow_forward
from .geometry import CropCountSampler, random_plan, sample_crop_count
from .model import Backbone, BackboneConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_base: float = 3e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    ema_warmup: bool = True   # decay ramps as (1 + s) / (10 + s) until it reaches ema_decay
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: float = 1.0
    max_steps: Optional[int] = None
    batch_size: int = 32
    grad_accum: int = 1
    lambda_repa: float = 0.5
    lambda_srepa: float = 0.5
    crop_size: int = 24
    p_cfg: float = 0.18
    p_global: float = 0.55
    init_token_id: Optional[int] = None
    k_mode: int = 1
    k_max: int = 9
    proj_hidden: int = 128
    proj_layers: int = 3
    teacher_dim: int = 64
    teacher_spatial_dim: int = 64
    teacher_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_base <= 0 or self.warmup_steps <= 0 or self.grad_clip <= 0:
            raise ValueError("learning rate, warmup and clip threshold must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lambda_repa < 0 or self.lambda_srepa < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def regimes(self) -> EncodeRegimes:
        return EncodeRegimes(self.p_cfg, self.p_global, self.init_token_id)

    @property
    def sampler(self) -> CropCountSampler:
        return CropCountSampler(self.k_mode, self.k_max)

    def total_steps(self, n_images: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return max(1, math.ceil(self.epochs * n_images / (self.batch_size * self.grad_accum)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    w = cfg.warmup_steps
    return cfg.lr_base * min(step / w, math.sqrt(w / step))


def ema_decay_at(step: int, cfg: TrainConfig) -> float:
    if not cfg.ema_warmup:
        return cfg.ema_decay
    return min(cfg.ema_decay, (1 + step) / (10 + step))


@torch.no_grad()
def ema_update(ema_params, params, decay: float) -> None:
    for e, p in zip(ema_params, params):
        e.mul_(decay).add_(p.detach(), alpha=1 - decay)


class NonFiniteLoss(RuntimeError):
    pass


def uint8_to_float(batch: torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) uint8 to (B, 3, H, W) float in [-1, 1]."""
    return batch.permute(0, 3, 1, 2).float() / 127.5 - 1.0


class Trainer:
    def __init__(self, model_cfg: BackboneConfig, cfg: TrainConfig):
        self.model_cfg, self.cfg = model_cfg, cfg
        torch.manual_seed(cfg.seed)
        self.model = Backbone(model_cfg)
        self.heads = AlignmentHeads(model_cfg.hidden, cfg.teacher_dim, cfg.teacher_spatial_dim,
                                    cfg.proj_hidden, cfg.proj_layers)
        self.ema = copy.deepcopy(self.model).requires_grad_(False)
        self.params = list(self.model.parameters()) + list(self.heads.parameters())
        self.opt = torch.optim.Adam(self.params, lr=cfg.lr_base, betas=cfg.betas, eps=cfg.adam_eps,
                                    weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0

    # -- one update ---------------------------------------------------------

    def losses(self, images: torch.Tensor, teacher) -> dict:
        cfg, mcfg = self.cfg, self.model_cfg
        k = sample_crop_count(cfg.sampler, self.rng)
        plans = [random_plan(self.rng, k, cfg.crop_size, mcfg.image_size) for _ in range(images.shape[0])]
        res = encode(self.model, images, plans, cfg.regimes, training=True, rng=self.rng)
        fm, out, _ = flow_forward(self.model, images, res.message.tokens, res.global_offsets, self.gen)
        repa = repa_loss(out.tap_image, teacher.spatial, self.heads.repa_projector)
        srepa = srepa_loss(out.tap_message, teacher.global_vec, self.heads.srepa_projector)
        total = fm + cfg.lambda_repa * repa + cfg.lambda_srepa * srepa
        return {"fm": fm, "repa": repa, "srepa": srepa, "total": total, "K": k}

    def train_step(self, batches) -> dict:
        """``batches`` is a list of (images, teacher_features) micro-batches, accumulated sequentially."""
        cfg = self.cfg
        self.step += 1
        lr = lr_at(self.step, cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        agg = {"fm": 0.0, "repa": 0.0, "srepa": 0.0, "total": 0.0}
        ks = []
        for images, teacher in batches:
            out = self.losses(images, teacher)
            if not torch.isfinite(out["total"]):
                self.opt.zero_grad(set_to_none=True)
                msg = (f"non-finite loss at step {self.step}: "
                       + ", ".join(f"{n}={out[n].detach().item()}" for n in ("fm", "repa", "srepa")))
                log.warning(msg)
                self.step -= 1
                raise NonFiniteLoss(msg)
            (out["total"] / len(batches)).backward()
            for n in agg:
                agg[n] += float(out[n].detach()) / len(batches)
            ks.append(out["K"])
        torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip)
        self.opt.step()
        ema_update(self.ema.parameters(), self.model.parameters(), ema_decay_at(self.step, cfg))
        return {"step": self.step, **agg, "lr": lr, "K": ks[0] if len(ks) == 1 else ks}

    # -- loop ---------------------------------------------------------------

    def sample_batches(self, data: torch.Tensor, teacher: TeacherTable) -> list:
        out = []
        for _ in range(self.cfg.grad_accum):
            idx = torch.from_numpy(self.rng.choice(data.shape[0], self.cfg.batch_size, replace=False))
            out.append((uint8_to_float(data[idx]), teacher[idx]))
        return out

    def fit(self, data: torch.Tensor, teacher: TeacherTable, steps: Optional[int] = None,
            metrics_path=None, callback: Optional[Callable] = None, log_every: int = 50) -> list:
        """Train on ``data`` ((N, H, W, 3) uint8) until ``steps`` total updates have been made."""
        steps = self.cfg.total_steps(data.shape[0]) if steps is None else steps
        history = []
        failures = 0
        f = open(metrics_path, "a") if metrics_path else None
        try:
            while self.step < steps:
                batches = self.sample_batches(data, teacher)
                try:
                    rec = self.train_step(batches)
                    failures = 0
                except NonFiniteLoss:
                    failures += 1
                    if failures > 10:
                        raise
                    continue
                history.append(rec)
                if f:
                    f.write(json.dumps(rec) + "\n")
                    f.flush()
                if log_every and self.step % log_every == 0:
                    log.info("step %d fm %.4f repa %.4f srepa %.4f lr %.2e", self.step, rec["fm"],
                             rec["repa"], rec["srepa"], rec["lr"])
                if callback is not None:
                    callback(self, rec)
        finally:
            if f:
                f.close()
        return history

    # -- checkpoints --------------------------------------------------------

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(
            {"model": self.model_cfg.to_dict(), "train": self.cfg.to_dict(), "step": self.step}, indent=2))
        weights = {f"model.{k}": v.contiguous() for k, v in self.model.state_dict().items()}
        weights.update({f"heads.{k}": v.contiguous() for k, v in self.heads.state_dict().items()})
        save_file(weights, str(d / "weights.safetensors"))
        save_file({k: v.contiguous() for k, v in self.ema.state_dict().items()}, str(d / "ema.safetensors"))
        torch.save({"optimizer": self.opt.state_dict(), "rng": self.rng.bit_generator.state,
                    "gen": self.gen.get_state()}, d / "state.pt")
        return d

    @classmethod
    def load(cls, directory, model_cfg: Optional[BackboneConfig] = None) -> "Trainer":
        d = Path(directory)
        if not (d / "config.json").exists():
            raise FileNotFoundError(f"no checkpoint at {d}")
        meta = json.loads((d / "config.json").read_text())
        stored = BackboneConfig.from_dict(meta["model"])
        if model_cfg is not None and model_cfg != stored:
            raise ValueError(f"checkpoint config {stored} does not match requested {model_cfg}")
        tr = cls(stored, TrainConfig.from_dict(meta["train"]))
        w = load_file(str(d / "weights.safetensors"))
        tr.model.load_state_dict({k[6:]: v for k, v in w.items() if k.startswith("model.")})
        tr.heads.load_state_dict({k[6:]: v for k, v in w.items() if k.startswith("heads.")})
        tr.ema.load_state_dict(load_file(str(d / "ema.safetensors")))
        state = torch.load(d / "state.pt", weights_only=False)
        tr.opt.load_state_dict(state["optimizer"])
        tr.rng.bit_generator.state = state["rng"]
        tr.gen.set_state(state["gen"])
        tr.step = meta["step"]
        return tr


def load_model(directory, ema: bool = True, model_cfg: Optional[BackboneConfig] = None) -> Backbone:
    """Inference model from a checkpoint directory (EMA weights by default)."""
    d = Path(directory)
    if not (d / "config.json").exists():
        raise FileNotFoundError(f"no checkpoint at {d}")
    meta = json.loads((d / "config.json").read_text())
    stored = BackboneConfig.from_dict(meta["model"])
    if model_cfg is not None and model_cfg != stored:
        raise ValueError(f"checkpoint config {stored} does not match requested {model_cfg}")
    model = Backbone(stored)
    if ema:
        model.load_state_dict(load_file(str(d / "ema.safetensors")))
    else:
        w = load_file(str(d / "weights.safetensors"))
        model.load_state_dict({k[6:]: v for k, v in w.items() if k.startswith("model.")})
    return model.eval()
