"""Crop bookkeeping: windows, normalized centers, offsets, and the crop-count sampler.

Coordinates are (x, y) = (column, row). A crop of side ``size`` whose top-left
pixel is ``(x0, y0)`` has its center at pixel ``x0 + size / 2`` and its
normalized center at ``(2 * c - S) / S`` for an image side ``S``, so the image
center maps to 0 and the borders to -1 / +1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Point = tuple[float, float]


class CropBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class CropCountSampler:
    """Skewed distribution over the number of crops aggregated per batch."""

    k_mode: int = 1
    k_max: int = 9
    noise_scale: float = 0.5
    shift: float = 0.125

    def __post_init__(self):
        if not 1 <= self.k_mode <= self.k_max:
            raise ValueError(f"need 1 <= k_mode <= k_max, got {self.k_mode}, {self.k_max}")


def clamp_crop_count(xi: int, k_max: int) -> int:
    return int(min(max(1, xi + 1), k_max))


def sample_crop_count(sampler: CropCountSampler, rng: np.random.Generator) -> int:
    eps = rng.standard_normal()
    tau = math.log(sampler.k_mode) + eps * sampler.noise_scale - sampler.shift
    xi = rng.poisson(math.exp(tau))
    return clamp_crop_count(int(xi), sampler.k_max)


def normalized_center(top_left: tuple[int, int], size: int, image_size: int) -> Point:
    x0, y0 = top_left
    s = float(image_size)
    return ((2 * (x0 + size / 2) - s) / s, (2 * (y0 + size / 2) - s) / s)


def top_left_from_center(center: Point, size: int, image_size: int) -> tuple[int, int]:
    """Inverse of :func:`normalized_center`; raises if the window is not pixel-aligned or in bounds."""
    out = []
    for c in center:
        x0 = (c + 1.0) * image_size / 2 - size / 2
        r = round(x0)
        if abs(x0 - r) > 1e-6:
            raise CropBoundsError(f"center {center} is not realizable by a pixel-aligned {size}px crop")
        if r < 0 or r + size > image_size:
            raise CropBoundsError(f"{size}px crop centered at {center} leaves the {image_size}px image")
        out.append(int(r))
    return out[0], out[1]


def extract_crop(image, top_left: tuple[int, int], size: int, image_size: int | None = None):
    """Cut the ``size x size`` window at ``top_left`` from the trailing (H, W) axes.

    Works for numpy arrays and torch tensors alike. Returns ``(patch, center)``.
    """
    h, w = image.shape[-2], image.shape[-1]
    x0, y0 = top_left
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise CropBoundsError(f"window at {top_left} of size {size} exceeds image {w}x{h}")
    if image_size is None:
        if h != w:
            raise ValueError("non-square image; pass image_size explicitly")
        image_size = w
    patch = image[..., y0:y0 + size, x0:x0 + size]
    return patch, normalized_center(top_left, size, image_size)


def paste_crop(image, patch, top_left: tuple[int, int]):
    x0, y0 = top_left
    size = patch.shape[-1]
    out = image.clone() if hasattr(image, "clone") else image.copy()
    out[..., y0:y0 + size, x0:x0 + size] = patch
    return out


@dataclass(frozen=True)
class CropPlan:
    centers: tuple[Point, ...]
    offsets: tuple[Point, ...]
    global_offset: Point
    has_global: bool
    crop_size: int
    image_size: int = field(default=64)

    def __len__(self):
        return len(self.centers)

    def size(self, k: int) -> int:
        return self.image_size if (k == 0 and self.has_global) else self.crop_size

    def top_left(self, k: int) -> tuple[int, int]:
        return top_left_from_center(self.centers[k], self.size(k), self.image_size)

    def crops(self, image):
        return [extract_crop(image, self.top_left(k), self.size(k), self.image_size)[0]
                for k in range(len(self))]

    def reconstruct_centers(self) -> list[Point]:
        x, y = self.centers[0]
        out = [(x, y)]
        for dx, dy in self.offsets[1:]:
            x, y = x + dx, y + dy
            out.append((x, y))
        return out

    def to_dict(self) -> dict:
        return {
            "centers": [list(c) for c in self.centers],
            "offsets": [list(a) for a in self.offsets],
            "global_offset": list(self.global_offset),
            "has_global": self.has_global,
            "crop_size": self.crop_size,
            "image_size": self.image_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CropPlan":
        return build_plan([tuple(c) for c in d["centers"]], d["has_global"],
                          crop_size=d["crop_size"], image_size=d.get("image_size", 64))

    @classmethod
    def from_json(cls, s: str) -> "CropPlan":
        return cls.from_dict(json.loads(s))


def build_plan(centers: Sequence[Point], with_global: bool, crop_size: int = 24,
               image_size: int = 64) -> CropPlan:
    if len(centers) == 0:
        raise ValueError("a crop plan needs at least one center")
    centers = tuple((float(x), float(y)) for x, y in centers)
    if with_global and centers[0] != (0.0, 0.0):
        raise ValueError(f"global crop must be centered at (0, 0), got {centers[0]}")
    for k, c in enumerate(centers):
        size = image_size if (k == 0 and with_global) else crop_size
        top_left_from_center(c, size, image_size)
    offsets = [(0.0, 0.0)]
    for prev, cur in zip(centers[:-1], centers[1:]):
        offsets.append((cur[0] - prev[0], cur[1] - prev[1]))
    last = centers[-1]
    return CropPlan(centers, tuple(offsets), (-last[0], -last[1]), bool(with_global),
                    int(crop_size), int(image_size))


def random_centers(rng: np.random.Generator, n: int, crop_size: int, image_size: int) -> list[Point]:
    """Centers of ``n`` crops with top-left corners uniform over all valid positions."""
    hi = image_size - crop_size
    if hi < 0:
        raise CropBoundsError(f"{crop_size}px crop does not fit a {image_size}px image")
    tl = rng.integers(0, hi + 1, size=(n, 2))
    return [normalized_center((int(x), int(y)), crop_size, image_size) for x, y in tl]


def random_plan(rng: np.random.Generator, k: int, crop_size: int = 24, image_size: int = 64,
                with_global: bool = False) -> CropPlan:
    n_local = k - 1 if with_global else k
    centers = random_centers(rng, n_local, crop_size, image_size)
    if with_global:
        centers = [(0.0, 0.0)] + centers
    return build_plan(centers, with_global, crop_size, image_size)


def with_global_first(plan: CropPlan) -> CropPlan:
    """Replace crop 1 by the full image; later crops keep their centers."""
    centers = [(0.0, 0.0)] + list(plan.centers[1:])
    return build_plan(centers, True, plan.crop_size, plan.image_size)
