"""Synthetic multi-object sprite scenes with masks and spatial relations."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "cross", "bar")
COLORS = ("red", "green", "blue", "yellow")
RGB = {"red": (220, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 230), "yellow": (230, 210, 40)}
PREDICATES = ("left-of", "right-of", "above", "below")
CATEGORIES = tuple(f"{c} {s}" for s in SHAPES for c in COLORS)

CANVAS = 64
MIN_AREA_FRAC = 0.05


def category_index(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def category_parts(cat: int) -> tuple[str, str]:
    return SHAPES[cat // len(COLORS)], COLORS[cat % len(COLORS)]


@dataclass
class SpriteObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    mask: np.ndarray                  # (H, W) bool
    center: tuple[float, float]       # mask centroid (x, y)

    @property
    def category(self) -> int:
        return category_index(self.shape, self.color)


@dataclass
class SpriteScene:
    canvas: np.ndarray                # (H, W, 3) uint8
    objects: list
    relations: list = field(default_factory=list)  # (subject_idx, predicate, object_idx)

    @property
    def categories(self) -> list[int]:
        return [o.category for o in self.objects]

    def foreground(self) -> np.ndarray:
        fg = np.zeros(self.canvas.shape[:2], dtype=bool)
        for o in self.objects:
            fg |= o.mask
        return fg

    def label_map(self) -> np.ndarray:
        """Per-pixel object index, -1 for background."""
        lab = np.full(self.canvas.shape[:2], -1, dtype=np.int64)
        for i, o in enumerate(self.objects):
            lab[o.mask] = i
        return lab

    def patch_labels(self, patch: int) -> np.ndarray:
        """Majority pixel label per patch (background wins ties)."""
        lab = self.label_map()
        g = lab.shape[0] // patch
        blocks = lab.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g, g, -1)
        labels = np.arange(-1, len(self.objects))
        counts = np.stack([(blocks == l).sum(-1) for l in labels], axis=-1)
        return labels[counts.argmax(-1)]

    def patch_mask(self, patch: int) -> np.ndarray:
        """Foreground max-pooled onto the patch grid."""
        fg = self.foreground()
        g = fg.shape[0] // patch
        return fg.reshape(g, patch, g, patch).any(axis=(1, 3))

    def to_record(self, idx: int) -> dict:
        return {
            "id": idx,
            "objects": [{"shape": o.shape, "color": o.color, "category": o.category,
                         "bbox": list(o.bbox), "center": list(o.center), "mask_rle": rle_encode(o.mask)}
                        for o in self.objects],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_record(cls, rec: dict, canvas: np.ndarray) -> "SpriteScene":
        objs = [SpriteObject(o["shape"], o["color"], tuple(o["bbox"]),
                             rle_decode(o["mask_rle"], canvas.shape[:2]), tuple(o["center"]))
                for o in rec["objects"]]
        return cls(canvas, objs, [tuple(r) for r in rec["relations"]])


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major mask, alternating background/foreground, starting with background."""
    flat = mask.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return runs


def rle_decode(runs: Sequence[int], shape) -> np.ndarray:
    vals = np.arange(len(runs)) % 2
    return np.repeat(vals, runs).astype(bool).reshape(shape)


def _shape_mask(shape: str, rng: np.random.Generator) -> np.ndarray:
    if shape == "bar":
        length, width = int(rng.integers(24, 31)), 9
        m = np.ones((width, length), dtype=bool)
        return m.T if rng.random() < 0.5 else m
    s = int(rng.integers(16, 25))
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    if shape == "circle":
        r = s / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "triangle":
        return np.abs(xx - s / 2) <= yy / 2
    if shape == "cross":
        t0, t1 = s // 3, s - s // 3
        return ((xx >= t0) & (xx < t1)) | ((yy >= t0) & (yy < t1))
    raise ValueError(f"unknown shape {shape!r}")


def _relation(sub: SpriteObject, obj: SpriteObject) -> str:
    dx = sub.center[0] - obj.center[0]
    dy = sub.center[1] - obj.center[1]
    if abs(dx) >= abs(dy):
        return "left-of" if dx < 0 else "right-of"
    return "above" if dy < 0 else "below"


def generate_scene(rng: np.random.Generator, n_objects: Optional[int] = None, size: int = CANVAS,
                   margin: int = 2) -> SpriteScene:
    n = int(rng.integers(1, 4)) if n_objects is None else n_objects
    cats = rng.choice(len(CATEGORIES), size=n, replace=False)
    min_area = MIN_AREA_FRAC * size * size
    while True:
        canvas = np.zeros((size, size, 3), dtype=np.uint8)
        objects, boxes, ok = [], [], True
        for cat in cats:
            shape, color = category_parts(int(cat))
            for _ in range(200):
                m = _shape_mask(shape, rng)
                if m.sum() < min_area:
                    continue
                h, w = m.shape
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                box = (x0, y0, x0 + w, y0 + h)
                if all(box[0] >= b[2] + margin or b[0] >= box[2] + margin or
                       box[1] >= b[3] + margin or b[1] >= box[3] + margin for b in boxes):
                    break
            else:
                ok = False
                break
            full = np.zeros((size, size), dtype=bool)
            full[y0:y0 + h, x0:x0 + w] = m
            ys, xs = np.nonzero(full)
            center = (float(xs.mean() + 0.5), float(ys.mean() + 0.5))
            objects.append(SpriteObject(shape, color, box, full, center))
            boxes.append(box)
            canvas[full] = RGB[color]
        if not ok:
            continue
        if any(a.center[0] == b.center[0] and a.center[1] == b.center[1]
               for a, b in itertools.combinations(objects, 2)):
            continue
        break
    relations = []
    for i, j in itertools.combinations(range(n), 2):
        s, o = (i, j) if rng.random() < 0.5 else (j, i)
        relations.append((s, _relation(objects[s], objects[o]), o))
    return SpriteScene(canvas, objects, relations)


def generate(n: int, seed: int = 0, size: int = CANVAS, start: int = 0) -> list[SpriteScene]:
    """Scene ``i`` depends only on ``(seed, i)``, so shards can be generated independently."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_scene(np.random.default_rng([seed, i]), size=size) for i in range(start, start + n)]


def images_tensor(scenes: Sequence[SpriteScene]):
    """Stack canvases into a float tensor in [-1, 1] of shape (N, 3, H, W)."""
    import torch
    arr = np.stack([s.canvas for s in scenes])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 127.5 - 1.0


# -- on-disk layout ----------------------------------------------------------

def save_dataset(root, scenes: Sequence[SpriteScene], splits: Optional[dict] = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "scenes.jsonl", "w") as f:
        for i, s in enumerate(scenes):
            Image.fromarray(s.canvas).save(root / "images" / f"{i:06d}.png")
            f.write(json.dumps(s.to_record(i)) + "\n")
    for name, ids in (splits or {}).items():
        (root / "splits").mkdir(exist_ok=True)
        (root / "splits" / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))


def load_dataset(root) -> list[SpriteScene]:
    root = Path(root)
    scenes = []
    with open(root / "scenes.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            canvas = np.asarray(Image.open(root / "images" / f"{rec['id']:06d}.png").convert("RGB"))
            scenes.append(SpriteScene.from_record(rec, canvas))
    return scenes


def load_split(root, name: str) -> list[int]:
    return [int(x) for x in (Path(root) / "splits" / f"{name}.txt").read_text().split()]


# -- compositional split -----------------------------------------------------

class InfeasibleSplitError(ValueError):
    pass


def assign_pairs(pairs: Sequence[frozenset], eval_fraction: float = 0.3,
                 rng: Optional[np.random.Generator] = None) -> tuple[set, set]:
    """Put every category pair in exactly one of (train, eval) so both cover all categories."""
    pairs = sorted(set(pairs), key=lambda p: tuple(sorted(p)))
    if len(pairs) < 2:
        raise InfeasibleSplitError("need at least two distinct category pairs")
    cats = sorted(set().union(*pairs))
    count = {c: sum(c in p for p in pairs) for c in cats}
    for c in cats:
        if count[c] < 2:
            raise InfeasibleSplitError(f"category {c!r} appears in only one pair; it cannot be in both splits")
    if rng is not None:
        pairs = [pairs[i] for i in rng.permutation(len(pairs))]

    train, evl = set(), set()
    need_t, need_e = set(cats), set(cats)
    for p in pairs:
        gt, ge = len(p & need_t), len(p & need_e)
        to_eval = ge > gt or (ge == gt and len(evl) < eval_fraction * (len(train) + len(evl)))
        (evl if to_eval else train).add(p)
        (need_e if to_eval else need_t).difference_update(p)

    def holders(side, c):
        return [q for q in side if c in q]

    changed = True
    while (need_t or need_e) and changed:
        changed = False
        for need, dst, src in ((need_e, evl, train), (need_t, train, evl)):
            for c in sorted(need, key=str):
                for q in sorted(holders(src, c), key=lambda q: tuple(sorted(q))):
                    if all(len(holders(src, x)) >= 2 for x in q):
                        src.remove(q)
                        dst.add(q)
                        need.difference_update(q)
                        changed = True
                        break
    missing = [c for c in cats if not holders(train, c) or not holders(evl, c)]
    if missing:
        raise InfeasibleSplitError(f"no pair assignment covers categories {missing} in both splits")
    return train, evl


def pair_disjoint_split(scenes: Sequence[SpriteScene], eval_fraction: float = 0.3,
                        seed: int = 0) -> tuple[list[int], list[int]]:
    """Indices of (train, eval) scenes; no category pair is shared between them."""
    keys = []
    for i, s in enumerate(scenes):
        cats = set(s.categories)
        if len(cats) != 2:
            raise ValueError(f"scene {i} has {len(cats)} categories; exactly two are required")
        keys.append(frozenset(cats))
    train_pairs, _ = assign_pairs(keys, eval_fraction, np.random.default_rng(seed))
    train = [i for i, k in enumerate(keys) if k in train_pairs]
    evl = [i for i, k in enumerate(keys) if k not in train_pairs]
    return train, evl
