"""Representation alignment against a frozen teacher.

``repa_loss`` aligns per-patch image features with the teacher's spatial grid;
``srepa_loss`` aligns the pooled message-slot features with the teacher's
global image vector through ``exp(-cos)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from .datagen import COLORS, SHAPES


@dataclass
class TeacherFeatures:
    global_vec: torch.Tensor  # (B, s)
    spatial: torch.Tensor     # (B, P, s_spatial)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; 0 wherever either vector has zero norm."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    denom = na * nb
    dot = (a * b).sum(-1)
    return torch.where(denom > 0, dot / denom.clamp_min(1e-30), torch.zeros_like(dot))


def srepa_loss(message_features: torch.Tensor, teacher_global: torch.Tensor,
               projector: Optional[nn.Module] = None) -> torch.Tensor:
    """Project (B, L, r) message-slot features, mean-pool over slots, return mean exp(-cos)."""
    f = projector(message_features) if projector is not None else message_features
    pooled = f.mean(dim=-2)
    return torch.exp(-cosine(teacher_global.to(pooled.dtype), pooled)).mean()


def repa_loss(image_features: torch.Tensor, teacher_spatial: torch.Tensor,
              projector: Optional[nn.Module] = None) -> torch.Tensor:
    f = projector(image_features) if projector is not None else image_features
    if f.shape[:-1] != teacher_spatial.shape[:-1]:
        raise ValueError(f"patch grid mismatch: {tuple(f.shape[:-1])} vs {tuple(teacher_spatial.shape[:-1])}")
    return (-cosine(f, teacher_spatial.to(f.dtype))).mean()


def mlp(in_dim: int, hidden: int, out_dim: int, layers: int = 3) -> nn.Sequential:
    dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
    mods = []
    for i in range(layers):
        mods.append(nn.Linear(dims[i], dims[i + 1]))
        if i < layers - 1:
            mods.append(nn.SiLU())
    return nn.Sequential(*mods)


class AlignmentHeads(nn.Module):
    def __init__(self, hidden: int, global_dim: int, spatial_dim: int, mlp_hidden: int = 128, layers: int = 3):
        super().__init__()
        self.srepa_projector = mlp(hidden, mlp_hidden, global_dim, layers)
        self.repa_projector = mlp(hidden, mlp_hidden, spatial_dim, layers)


# -- teachers ---------------------------------------------------------------

class OracleTeacher:
    """Deterministic stand-in for a frozen SSL teacher, computed from scene metadata.

    Every shape and color owns a fixed random vector; an object is the sum of
    its two attribute vectors. The global vector is the normalized sum over
    objects (background vector for an empty scene); each patch of the spatial
    grid carries the vector of the object covering most of it.
    """

    def __init__(self, dim: int = 64, spatial_dim: int = 64, patch: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim, self.spatial_dim, self.patch = dim, spatial_dim, patch

        def table(n, d):
            return torch.from_numpy(rng.standard_normal((n, d)) / np.sqrt(d)).float()

        self.shape_g, self.color_g, self.bg_g = table(len(SHAPES), dim), table(len(COLORS), dim), table(1, dim)[0]
        self.shape_s, self.color_s, self.bg_s = (table(len(SHAPES), spatial_dim), table(len(COLORS), spatial_dim),
                                                 table(1, spatial_dim)[0])
        cats = [(s, c) for s in range(len(SHAPES)) for c in range(len(COLORS))]
        # row 0 is background, row 1 + category otherwise
        self.patch_table = torch.stack([self.bg_s] + [self.shape_s[s] + self.color_s[c] for s, c in cats])

    @staticmethod
    def _attrs(obj) -> tuple[int, int]:
        shape = obj["shape"] if isinstance(obj, dict) else obj.shape
        color = obj["color"] if isinstance(obj, dict) else obj.color
        if shape not in SHAPES or color not in COLORS:
            raise ValueError(f"unknown category {color} {shape}")
        return SHAPES.index(shape), COLORS.index(color)

    def global_vec(self, scene) -> torch.Tensor:
        objs = scene.objects
        if not objs:
            v = self.bg_g
        else:
            v = sum(self.shape_g[s] + self.color_g[c] for s, c in map(self._attrs, objs))
        return v / torch.linalg.vector_norm(v)

    def patch_ids(self, scene) -> torch.Tensor:
        """(P,) row indices into ``patch_table``."""
        lab = scene.patch_labels(self.patch).ravel()
        cats = [0] + [1 + s * len(COLORS) + c for s, c in map(self._attrs, scene.objects)]
        return torch.tensor([cats[l + 1] for l in lab], dtype=torch.long)

    def __call__(self, scenes: Sequence) -> TeacherFeatures:
        g = torch.stack([self.global_vec(s) for s in scenes])
        sp = self.patch_table[torch.stack([self.patch_ids(s) for s in scenes])]
        return TeacherFeatures(g, sp)

    def table(self, scenes: Sequence) -> "TeacherTable":
        return TeacherTable(torch.stack([self.global_vec(s) for s in scenes]),
                            torch.stack([self.patch_ids(s) for s in scenes]), self.patch_table)


@dataclass
class TeacherTable:
    """Precomputed teacher outputs for a fixed dataset, indexed by scene position."""

    global_vecs: torch.Tensor
    patch_ids: Optional[torch.Tensor] = None
    patch_table: Optional[torch.Tensor] = None
    spatial: Optional[torch.Tensor] = None

    def __getitem__(self, idx) -> TeacherFeatures:
        if self.spatial is not None:
            sp = self.spatial[idx]
        else:
            sp = self.patch_table[self.patch_ids[idx]]
        return TeacherFeatures(self.global_vecs[idx], sp)

    def __len__(self):
        return self.global_vecs.shape[0]


def save_teacher_features(path, ids: Sequence[int], features: TeacherFeatures) -> None:
    """Write ``<path>.safetensors`` plus a ``<path>.json`` manifest."""
    path = Path(path)
    b, p, sd = features.spatial.shape
    save_file({"global": features.global_vec.contiguous().float(),
               "spatial": features.spatial.reshape(b, p * sd).contiguous().float()},
              str(path.with_suffix(".safetensors")))
    manifest = {"ids": [int(i) for i in ids], "dim": features.global_vec.shape[1],
                "patches": p, "spatial_dim": sd}
    path.with_suffix(".json").write_text(json.dumps(manifest))


class FileTeacher:
    """Teacher backed by precomputed features for real images."""

    def __init__(self, path):
        path = Path(path)
        self.manifest = json.loads(path.with_suffix(".json").read_text())
        tensors = load_file(str(path.with_suffix(".safetensors")))
        m = self.manifest
        self._row = {i: r for r, i in enumerate(m["ids"])}
        self.global_vecs = tensors["global"]
        self.spatial = tensors["spatial"].reshape(len(m["ids"]), m["patches"], m["spatial_dim"])
        self.dim, self.spatial_dim = m["dim"], m["spatial_dim"]

    def __call__(self, image_ids: Sequence[int]) -> TeacherFeatures:
        try:
            rows = torch.tensor([self._row[int(i)] for i in image_ids])
        except KeyError as e:
            raise KeyError(f"no teacher features for image id {e.args[0]}") from None
        return TeacherFeatures(self.global_vecs[rows], self.spatial[rows])

    def table(self, image_ids: Sequence[int]) -> TeacherTable:
        f = self(image_ids)
        return TeacherTable(f.global_vec, spatial=f.spatial)
