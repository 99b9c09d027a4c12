"""Per-image salient-statistics pipeline for single-branch fusion.

For each training image the cascade levels are reduced to one factor per
level: channel-max saliency, object regions projected into feature cells,
max-pooled over each region, averaged over objects, then pushed through a
scaled softmax.  The scaling (by the number of levels L) makes the
uniform case come out at exactly 1.0 per level, which is what gives the
"factor >= 1 means the level is relevant" rule its bite: raw softmax over
3 levels can never reach 1.

Factors drive a weighted fusion at the finest grid.  During training the
current image's factors are used; for inference the per-image factors are
averaged into a FactorSet and only relevant levels are fused.

Factors are plain float vectors, not graph tensors: the statistics path
is deliberately outside autodiff (only the projection convs learn).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .connections import FeatureCascade, align_cascade


class ObjectAnnotation:
    """Axis-aligned box (x, y, w, h) in image pixels plus a class label."""

    __slots__ = ("x", "y", "w", "h", "class_id")

    def __init__(self, x: float, y: float, w: float, h: float, class_id: int = 0):
        if w < 1 or h < 1:
            raise ValueError(f"degenerate box {w}x{h}")
        self.x, self.y, self.w, self.h = float(x), float(y), float(w), float(h)
        self.class_id = int(class_id)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def __repr__(self):
        return (f"ObjectAnnotation({self.x:g}, {self.y:g}, {self.w:g}, {self.h:g}, "
                f"class_id={self.class_id})")


def project_region(box, stride: int, map_h: int, map_w: int) -> tuple[int, int, int, int]:
    """Map a pixel box onto feature cells: floor the near edge, ceil the far
    edge, keep at least one cell, clamp to the map."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    x, y, w, h = box
    cx = math.floor(x / stride)
    cy = math.floor(y / stride)
    cx2 = max(math.ceil((x + w) / stride), cx + 1)
    cy2 = max(math.ceil((y + h) / stride), cy + 1)
    cx = min(max(cx, 0), map_w - 1)
    cy = min(max(cy, 0), map_h - 1)
    cx2 = min(max(cx2, cx + 1), map_w)
    cy2 = min(max(cy2, cy + 1), map_h)
    if cx >= map_w or cy >= map_h:
        raise ValueError(f"box {box} lies outside a {map_h}x{map_w} map at stride {stride}")
    return cx, cy, cx2 - cx, cy2 - cy


def orsp(salient_map: np.ndarray, region: tuple[int, int, int, int]) -> float:
    """Max over one projected region of a (H, W) or (1, H, W) saliency map."""
    sal = np.asarray(salient_map)
    if sal.ndim == 3:
        sal = sal[0]
    cx, cy, cw, ch = region
    if cw < 1 or ch < 1:
        raise ValueError(f"empty region {region}")
    patch = sal[cy:cy + ch, cx:cx + cw]
    if patch.size == 0:
        raise ValueError(f"region {region} outside {sal.shape} map")
    return float(patch.max())


def scaled_softmax(values, scale: float) -> np.ndarray:
    """scale * softmax(values); equal inputs give exactly scale/len each."""
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(v - v.max())
    return (scale * e) / e.sum()


def image_factors(cascade: FeatureCascade, objects: Sequence[ObjectAnnotation]) -> np.ndarray:
    """Factors for one image: per-level mean over objects of region-max
    saliency, scaled-softmaxed so the factors sum to the level count."""
    if not objects:
        raise ValueError("image_factors needs at least one object")
    k = cascade.degrees_of_freedom
    expect = np.zeros(k)
    with T.no_grad():
        for l, (level, stride) in enumerate(zip(cascade.levels, cascade.strides)):
            sal = T.channel_max(level).data
            sal2d = sal.reshape(sal.shape[-2:])
            h, w = sal2d.shape
            vals = [orsp(sal2d, project_region(o.box, stride, h, w)) for o in objects]
            expect[l] = float(np.mean(vals))
    return scaled_softmax(expect, float(k))


@dataclass
class SalientStack:
    """Running per-level sum and count of per-image factors."""

    sums: Optional[np.ndarray] = None
    count: int = 0

    def update(self, factors) -> None:
        lam = np.asarray(factors, dtype=np.float64)
        if self.sums is None:
            self.sums = lam.copy()
        else:
            if lam.shape != self.sums.shape:
                raise ValueError(f"factor length {lam.shape} != stack {self.sums.shape}")
            self.sums += lam
        self.count += 1

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no factors accumulated")
        return self.sums / self.count


@dataclass
class FactorSet:
    """Finalized factors for inference plus the relevance mask."""

    lam_infer: np.ndarray
    relevance: list[bool]
    count: int
    lam_train: Optional[np.ndarray] = None  # last per-image factors, informational

    def __post_init__(self):
        self.lam_infer = np.asarray(self.lam_infer, dtype=np.float64)
        if list(self.relevance) != [bool(v >= 1.0) for v in self.lam_infer]:
            raise ValueError("relevance flags disagree with lam_infer >= 1")


def finalize(stack: SalientStack) -> FactorSet:
    lam = stack.mean()
    return FactorSet(lam_infer=lam, relevance=[bool(v >= 1.0) for v in lam],
                     count=stack.count)


def fuse_train(cascade: FeatureCascade, factors,
               projections: Optional[Sequence[Optional[Callable[[T.Tensor], T.Tensor]]]] = None,
               ) -> T.Tensor:
    """Factor-weighted sum of projected, finest-grid-aligned levels."""
    lam = np.asarray(factors, dtype=np.float64)
    if lam.size != len(cascade):
        raise ValueError(f"{lam.size} factors for {len(cascade)} levels")
    aligned = align_cascade(cascade, target_level=0, projections=projections)
    out = None
    for li, a in zip(lam, aligned):
        if li == 0.0:
            continue
        term = a if li == 1.0 else T.scale(a, li)
        out = term if out is None else T.add(out, term)
    if out is None:
        return T.zeros(aligned[0].shape)
    return out


def fuse_infer(cascade: FeatureCascade, fs: FactorSet,
               projections: Optional[Sequence[Optional[Callable[[T.Tensor], T.Tensor]]]] = None,
               ) -> T.Tensor:
    """Like fuse_train but only levels whose inference factor passed the
    relevance threshold contribute."""
    if not any(fs.relevance):
        raise ValueError("no relevant levels in factor set; nothing to fuse")
    masked = np.where(fs.relevance, fs.lam_infer, 0.0)
    return fuse_train(cascade, masked, projections=projections)
