"""Frozen-token probes: a small attention network trained on top of message ids.

Three protocols are provided. Classification predicts the dominant object's
category, the compositional task asks for both categories of a two-object
scene within the top 5, and the relational task picks the correct
(subject, predicate, object) triplet among distractors.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import CATEGORIES, PREDICATES
from .quantizer import FsqSpec, ids_to_values, read_message_dump

TASKS = ("single-label", "multi-label", "relational")


@dataclass(frozen=True)
class ProbeConfig:
    task: str = "single-label"
    model_dim: int = 128
    depth: int = 2
    heads: int = 8
    seq_len: int = 16
    n_classes: int = len(CATEGORIES)
    n_predicates: int = len(PREDICATES)
    levels: Optional[tuple] = None     # FSQ levels; None learns an embedding over ``vocab_size``
    vocab_size: Optional[int] = None
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    negatives: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.depth != 2:
            raise ValueError("probes use exactly two attention layers")
        if self.levels is None and self.vocab_size is None:
            raise ValueError("need FSQ levels or a vocabulary size to embed tokens")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def type_vocab(self) -> int:
        # CLS and image tokens; the relational task adds subject, predicate and object slots
        return 5 if self.task == "relational" else 2


class ProbeNet(nn.Module):
    def __init__(self, cfg: ProbeConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        if cfg.levels is not None:
            self.fsq = FsqSpec(cfg.levels)
            self.token_proj = nn.Linear(self.fsq.token_dim, d)
        else:
            self.fsq = None
            self.token_embed = nn.Embedding(cfg.vocab_size, d)
        extra = 3 if cfg.task == "relational" else 0
        self.cls = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.randn(1, 1 + cfg.seq_len + extra, d) * 0.02)
        self.type_embed = nn.Embedding(cfg.type_vocab, d)
        layer = nn.TransformerEncoderLayer(d, cfg.heads, 4 * d, dropout=0.0, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        if cfg.task == "relational":
            self.category_embed = nn.Embedding(cfg.n_classes, d)
            self.predicate_embed = nn.Embedding(cfg.n_predicates, d)
            self.label_proj = nn.Linear(d, d)
            self.head = nn.Linear(d, 1)
            types = [0] + [1] * cfg.seq_len + [2, 3, 4]
        else:
            self.head = nn.Linear(d, cfg.n_classes)
            types = [0] + [1] * cfg.seq_len
        self.register_buffer("types", torch.tensor(types), persistent=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        if self.fsq is not None:
            return self.token_proj(ids_to_values(ids, self.fsq))
        return self.token_embed(ids)

    def forward(self, ids: torch.Tensor, triplets: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Class logits (B, C), or compatibility logits (B,) / (B, M) for (B, 3) / (B, M, 3) triplets."""
        if ids.shape[-1] != self.cfg.seq_len:
            raise ValueError(f"probe trained for {self.cfg.seq_len} tokens, got {ids.shape[-1]}")
        x = self.embed_tokens(ids)
        b = x.shape[0]
        if self.cfg.task != "relational":
            seq = torch.cat([self.cls.expand(b, -1, -1), x], dim=1)
            h = self.encoder(seq + self.pos + self.type_embed(self.types))
            return self.head(self.norm(h[:, 0]))
        if triplets is None:
            raise ValueError("relational probe needs triplets")
        squeeze = triplets.ndim == 2
        trip = triplets[:, None] if squeeze else triplets
        m = trip.shape[1]
        labels = torch.stack([self.category_embed(trip[..., 0]), self.predicate_embed(trip[..., 1]),
                              self.category_embed(trip[..., 2])], dim=2)      # (B, M, 3, d)
        labels = self.label_proj(labels).reshape(b * m, 3, -1)
        x = x[:, None].expand(b, m, *x.shape[1:]).reshape(b * m, *x.shape[1:])
        seq = torch.cat([self.cls.expand(b * m, -1, -1), x, labels], dim=1)
        h = self.encoder(seq + self.pos + self.type_embed(self.types))
        out = self.head(self.norm(h[:, 0])).reshape(b, m)
        return out[:, 0] if squeeze else out


# -- metrics ---------------------------------------------------------------------

def top1_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if labels.numel() == 0:
        raise ValueError("empty split")
    return float((logits.argmax(-1) == labels).float().mean())


def both_in_top5(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row success: every positive label of the 2-hot ``targets`` is among the 5 largest logits."""
    k = min(5, logits.shape[-1])
    top = torch.zeros_like(targets, dtype=torch.bool).scatter_(-1, logits.topk(k, dim=-1).indices, True)
    return (top | ~targets.bool()).all(-1)


def pairs_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    if targets.shape[0] == 0:
        raise ValueError("empty split")
    return float(both_in_top5(logits, targets).float().mean())


def relation_accuracy(scores: torch.Tensor) -> float:
    """``scores`` is (N, 1 + n) with the positive in column 0; ties count as failures."""
    if scores.shape[0] == 0:
        raise ValueError("empty split")
    return float((scores[:, 0] > scores[:, 1:].max(-1).values).float().mean())


def random_pairs_baseline(n_classes: int = 20) -> float:
    """Chance that two fixed labels both land in a uniformly random top-5."""
    return math.comb(n_classes - 2, 3) / math.comb(n_classes, 5)


# -- datasets --------------------------------------------------------------------

@dataclass
class ProbeExample:
    ids: np.ndarray           # (L,) frozen token ids
    label: object = None      # category, (cat_a, cat_b), or list of (subj_cat, pred, obj_cat)
    image_id: int = -1


def dominant_category(scene) -> int:
    areas = [o.mask.sum() for o in scene.objects]
    return scene.objects[int(np.argmax(areas))].category


def scene_triplets(scene) -> list[tuple[int, int, int]]:
    cats = scene.categories
    return [(cats[s], PREDICATES.index(p), cats[o]) for s, p, o in scene.relations]


def make_examples(ids: np.ndarray, scenes: Sequence, task: str, image_ids=None) -> list[ProbeExample]:
    """Pair token rows with labels for ``task``; scenes the task cannot use are skipped."""
    image_ids = range(len(scenes)) if image_ids is None else image_ids
    out = []
    for row, sc, iid in zip(ids, scenes, image_ids):
        if task == "single-label":
            out.append(ProbeExample(np.asarray(row), dominant_category(sc), int(iid)))
        elif task == "multi-label":
            cats = sorted(set(sc.categories))
            if len(cats) != 2:
                raise ValueError(f"image {iid} has {len(cats)} categories; the pair task needs exactly two")
            out.append(ProbeExample(np.asarray(row), tuple(cats), int(iid)))
        else:
            trips = scene_triplets(sc)
            if trips:
                out.append(ProbeExample(np.asarray(row), trips, int(iid)))
    return out


def _ids(examples) -> torch.Tensor:
    return torch.from_numpy(np.stack([e.ids for e in examples]).astype(np.int64))


def _targets(examples, cfg: ProbeConfig) -> torch.Tensor:
    if cfg.task == "single-label":
        return torch.tensor([e.label for e in examples], dtype=torch.long)
    t = torch.zeros(len(examples), cfg.n_classes)
    for i, e in enumerate(examples):
        t[i, list(e.label)] = 1.0
    return t


def sample_candidates(examples, pool, n: int, rng: np.random.Generator) -> torch.Tensor:
    """(N, 1 + n, 3): one true triplet per image followed by ``n`` triplets from other images."""
    if not examples:
        raise ValueError("empty split")
    owners: dict = {}
    for e in pool:
        for t in e.label:
            owners.setdefault(t, set()).add(e.image_id)
    distinct = list(owners)
    out = []
    for e in examples:
        own = set(e.label)
        cands = [t for t in distinct if t not in own and owners[t] - {e.image_id}]
        if len(cands) < n:
            raise ValueError(f"only {len(cands)} candidate negatives for image {e.image_id}; need {n}")
        pos = e.label[rng.integers(len(e.label))]
        neg = [cands[i] for i in rng.choice(len(cands), n, replace=False)]
        out.append([pos] + neg)
    return torch.tensor(out, dtype=torch.long)


# -- training --------------------------------------------------------------------

@dataclass
class ProbeResult:
    task: str
    accuracy: float
    best_step: int
    val_accuracy: float
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "accuracy": self.accuracy, "best_step": self.best_step,
                "val_accuracy": self.val_accuracy}


@torch.no_grad()
def evaluate(probe: ProbeNet, examples, pool=None, seed: int = 0) -> float:
    """Accuracy of ``probe`` under its task's protocol; ``pool`` supplies relational negatives."""
    cfg = probe.cfg
    if not examples:
        raise ValueError("empty split")
    probe.eval()
    ids = _ids(examples)
    if cfg.task == "relational":
        cands = sample_candidates(examples, pool if pool is not None else examples, cfg.negatives,
                                  np.random.default_rng(seed))
        scores = torch.cat([probe(ids[i:i + 256], cands[i:i + 256]) for i in range(0, len(ids), 256)])
        return relation_accuracy(scores)
    logits = torch.cat([probe(ids[i:i + 512]) for i in range(0, len(ids), 512)])
    tg = _targets(examples, cfg)
    return top1_accuracy(logits, tg) if cfg.task == "single-label" else pairs_accuracy(logits, tg)


def train_probe(cfg: ProbeConfig, train, val, test=None) -> tuple[ProbeNet, ProbeResult]:
    """Adam at a fixed rate, early stopping on validation accuracy evaluated once per epoch.

    The returned probe holds the best-validation weights; ``accuracy`` is measured on
    ``test`` (or on ``val`` when no test split is given).
    """
    if not train or not val:
        raise ValueError("empty split")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    probe = ProbeNet(cfg)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    ids = _ids(train)
    tg = None if cfg.task == "relational" else _targets(train, cfg)
    best, best_state, best_step, stale, step = -1.0, None, 0, 0, 0
    history = []
    for epoch in range(cfg.max_epochs):
        probe.train()
        perm = torch.from_numpy(rng.permutation(len(train)))
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if cfg.task == "relational":
                cands = sample_candidates([train[j] for j in idx.tolist()], train, cfg.negatives, rng)
                loss = F.cross_entropy(probe(ids[idx], cands), torch.zeros(len(idx), dtype=torch.long))
            elif cfg.task == "single-label":
                loss = F.cross_entropy(probe(ids[idx]), tg[idx])
            else:
                loss = F.binary_cross_entropy_with_logits(probe(ids[idx]), tg[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        acc = evaluate(probe, val, pool=val, seed=cfg.seed)
        history.append({"epoch": epoch + 1, "step": step, "val_accuracy": acc})
        if acc > best:
            best, best_state, best_step, stale = acc, copy.deepcopy(probe.state_dict()), step, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    probe.load_state_dict(best_state)
    final = evaluate(probe, test, pool=test, seed=cfg.seed + 1) if test else best
    return probe, ProbeResult(cfg.task, final, best_step, best, history)


def write_results(path, result: ProbeResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2))


# -- token dumps -----------------------------------------------------------------

def load_token_dir(directory) -> tuple[dict, dict]:
    """Read ``<image_id>.comt`` files. Returns ``({image_id: ids}, tokenizer_info)``.

    ``tokenizer.json`` (optional) may carry ``levels`` for FSQ-aware embedding;
    otherwise only the vocabulary size stored in the dumps is known.
    """
    d = Path(directory)
    files = sorted(d.glob("*.comt"))
    if not files:
        raise FileNotFoundError(f"no .comt files in {d}")
    info = json.loads((d / "tokenizer.json").read_text()) if (d / "tokenizer.json").exists() else {}
    out, vocab, length = {}, None, None
    for f in files:
        ids, v = read_message_dump(f)
        if vocab is not None and (v != vocab or ids.size != length):
            raise ValueError(f"{f}: dump shape differs from the rest of the directory")
        vocab, length = v, ids.size
        out[int(f.stem)] = ids
    info.setdefault("vocab_size", vocab)
    info.setdefault("length", length)
    return out, info


def probe_config_for(info: dict, task: str, **kw) -> ProbeConfig:
    return ProbeConfig(task=task, seq_len=info["length"], levels=info.get("levels"),
                       vocab_size=info["vocab_size"], **kw)
