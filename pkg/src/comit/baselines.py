"""Paired ablation runs: a base arm and an arm that differs in one declared setting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .analysis import AttnAnalysisConfig, miou_best_token, token_attention_maps
from .datagen import images_tensor
from .model import BackboneConfig
from .policies import encode_global
from .quantizer import LatentMessage
from .probes import ProbeConfig, make_examples, train_probe
from .trainer import TrainConfig, Trainer

# desk-scale bottleneck presets: (levels, message length)
BOTTLENECKS = {"S": ((5, 5, 4), 8), "M": ((5, 5, 4, 4), 16), "L": ((8, 8, 5, 5), 16)}

# resolved-config keys each ablation may touch
DELTA_KEYS = {
    "srepa_off": {"train.lambda_srepa"},
    "locals_off": {"train.k_max", "train.p_global"},
    "bottleneck": {"model.levels", "model.message_length"},
}


class ConfigDriftError(ValueError):
    pass


@dataclass(frozen=True)
class AblationSpec:
    name: str
    kind: str                          # srepa_off | locals_off | bottleneck
    bottleneck: Optional[str] = None   # S | M | L, for the bottleneck kind

    def __post_init__(self):
        if self.kind not in DELTA_KEYS:
            raise ValueError(f"unknown ablation {self.kind!r}")
        if (self.kind == "bottleneck") != (self.bottleneck is not None):
            raise ValueError("a bottleneck preset is required for, and only for, the bottleneck ablation")
        if self.bottleneck is not None and self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"unknown bottleneck preset {self.bottleneck!r}")

    def apply(self, model_cfg: BackboneConfig, train_cfg: TrainConfig):
        if self.kind == "srepa_off":
            return model_cfg, replace(train_cfg, lambda_srepa=0.0)
        if self.kind == "locals_off":
            # a single full-image crop every time, so the message is never refined
            return model_cfg, replace(train_cfg, k_max=1, p_global=1.0)
        levels, length = BOTTLENECKS[self.bottleneck]
        return replace(model_cfg, levels=levels, message_length=length), train_cfg


def resolved(model_cfg: BackboneConfig, train_cfg: TrainConfig) -> dict:
    flat = {f"model.{k}": v for k, v in model_cfg.to_dict().items()}
    flat.update({f"train.{k}": v for k, v in train_cfg.to_dict().items()})
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in flat.items()}


def config_diff(a: dict, b: dict) -> set:
    return {k for k in a.keys() | b.keys() if a.get(k) != b.get(k)}


def check_drift(spec: AblationSpec, base: tuple, ablated: tuple) -> set:
    """Keys that differ between arms; raises unless they all belong to the declared delta."""
    diff = config_diff(resolved(*base), resolved(*ablated))
    extra = diff - DELTA_KEYS[spec.kind]
    if extra:
        raise ConfigDriftError(f"arms of {spec.name!r} also differ in {sorted(extra)}")
    return diff


# -- evaluation shared by both arms ----------------------------------------------

@dataclass
class EvalSuite:
    """Probe and attention-IoU evaluation on global-crop encodings."""

    probe_scenes: Sequence
    splits: tuple                       # (train, val, test) index lists into probe_scenes
    attn_scenes: Sequence
    probe_task: str = "single-label"
    probe_kwargs: dict = field(default_factory=dict)
    attn: AttnAnalysisConfig = AttnAnalysisConfig()


def evaluate_model(model, suite: EvalSuite) -> dict:
    mcfg = model.config
    ids = encode_global(model, images_tensor(suite.probe_scenes)).numpy()
    tr, va, te = suite.splits
    ex = lambda idx: make_examples(ids[idx], [suite.probe_scenes[i] for i in idx], suite.probe_task, idx)
    pcfg = ProbeConfig(task=suite.probe_task, seq_len=mcfg.message_length, levels=mcfg.levels,
                       **suite.probe_kwargs)
    _, res = train_probe(pcfg, ex(list(tr)), ex(list(va)), ex(list(te)))

    images = images_tensor(suite.attn_scenes)
    ids_a = encode_global(model, images)
    msg = LatentMessage.from_ids(ids_a, mcfg.fsq)
    maps = token_attention_maps(model, images, msg, config=suite.attn).numpy()
    masks = [s.patch_mask(mcfg.patch_size) for s in suite.attn_scenes]
    miou, _ = miou_best_token(maps, masks, suite.attn.threshold_q)
    return {"probe_accuracy": res.accuracy, "probe_best_step": res.best_step, "miou": miou,
            "unique_tokens": int(np.unique(ids).size)}


@dataclass
class ArmResult:
    model_cfg: BackboneConfig
    train_cfg: TrainConfig
    metrics: dict
    history: list


def train_arm(model_cfg, train_cfg, data: torch.Tensor, teacher, suite: EvalSuite, steps: int,
              checkpoint: Optional[Path] = None) -> ArmResult:
    tr = Trainer(model_cfg, train_cfg)
    hist = tr.fit(data, teacher, steps=steps, log_every=0)
    if checkpoint is not None:
        tr.save(checkpoint)
    return ArmResult(model_cfg, train_cfg, evaluate_model(tr.ema.eval(), suite), hist)


def run_ablation_pair(spec: AblationSpec, model_cfg: BackboneConfig, train_cfg: TrainConfig,
                      data: torch.Tensor, teacher, suite: EvalSuite, steps: int, out_dir=None,
                      base: Optional[ArmResult] = None) -> tuple[dict, ArmResult]:
    """Train (or reuse) the base arm, train the ablated arm, and report paired metrics.

    ``base`` lets several ablations share one base run trained with the same seed and data.
    """
    abl_cfgs = spec.apply(model_cfg, train_cfg)
    delta = check_drift(spec, (model_cfg, train_cfg), abl_cfgs)
    if base is None:
        base = train_arm(model_cfg, train_cfg, data, teacher, suite, steps)
    elif config_diff(resolved(base.model_cfg, base.train_cfg), resolved(model_cfg, train_cfg)):
        raise ConfigDriftError("reused base arm was trained with a different configuration")
    ablated = train_arm(*abl_cfgs, data, teacher, suite, steps)
    report = {
        "name": spec.name, "kind": spec.kind, "bottleneck": spec.bottleneck, "steps": steps,
        "delta": {k: [resolved(model_cfg, train_cfg)[k], resolved(*abl_cfgs)[k]] for k in sorted(delta)},
        "base": base.metrics, "ablated": ablated.metrics,
        # signed base-minus-ablated differences
        "deltas": {k: base.metrics[k] - ablated.metrics[k] for k in ("probe_accuracy", "miou")},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_report.json").write_text(json.dumps(report, indent=2))
    return report, base
