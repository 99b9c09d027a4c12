"""Target assignment and training losses for the toy detector.

Anchor-free, one positive cell per object: each annotation lands on
exactly one pyramid level (picked by its longer side against the level
size thresholds) and marks the cell under its center.  Box regression
uses center offsets within the cell plus log-scale extents, all relative
to the level stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .kdn import ObjectAnnotation

# objects with max side <= threshold[l] belong to level l; bigger than all
# thresholds means the coarsest level
SIZE_THRESHOLDS = {3: (16.0, 32.0), 4: (16.0, 32.0, 64.0), 1: ()}


def level_for_object(annot: ObjectAnnotation, num_levels: int) -> int:
    thresholds = SIZE_THRESHOLDS[num_levels]
    side = max(annot.w, annot.h)
    for l, t in enumerate(thresholds):
        if side <= t:
            return l
    return num_levels - 1


@dataclass
class LevelTargets:
    cls: np.ndarray   # (num_classes, H, W) 0/1
    box: np.ndarray   # (4, H, W)
    pos: np.ndarray   # (1, H, W) 0/1


def encode_box(annot: ObjectAnnotation, stride: int, h: int, w: int):
    """Returns (cell_y, cell_x, target_vector)."""
    cx = annot.x + annot.w / 2.0
    cy = annot.y + annot.h / 2.0
    gx = min(max(int(math.floor(cx / stride)), 0), w - 1)
    gy = min(max(int(math.floor(cy / stride)), 0), h - 1)
    t = np.array([cx / stride - gx - 0.5,
                  cy / stride - gy - 0.5,
                  math.log(annot.w / stride),
                  math.log(annot.h / stride)])
    return gy, gx, t


def decode_box(cell_y: int, cell_x: int, t, stride: int) -> tuple[float, float, float, float]:
    cx = (cell_x + 0.5 + t[0]) * stride
    cy = (cell_y + 0.5 + t[1]) * stride
    w = math.exp(t[2]) * stride
    h = math.exp(t[3]) * stride
    return cx - w / 2.0, cy - h / 2.0, w, h


def assign_targets(annots: Sequence[ObjectAnnotation],
                   geometry: Sequence[tuple[int, int, int]],
                   num_classes: int) -> tuple[list[LevelTargets], list[tuple]]:
    """Per-level target maps for one image plus the assignment records
    (level, cell_y, cell_x, class_id) — one record per object even when
    two centers collide on a cell."""
    num_levels = len(geometry)
    targets = [LevelTargets(cls=np.zeros((num_classes, h, w)),
                            box=np.zeros((4, h, w)),
                            pos=np.zeros((1, h, w)))
               for (_, h, w) in geometry]
    records = []
    for a in annots:
        l = level_for_object(a, num_levels)
        stride, h, w = geometry[l]
        gy, gx, t = encode_box(a, stride, h, w)
        tl = targets[l]
        tl.cls[:, gy, gx] = 0.0  # a collision hands the cell to the later object
        tl.cls[a.class_id, gy, gx] = 1.0
        tl.box[:, gy, gx] = t
        tl.pos[0, gy, gx] = 1.0
        records.append((l, gy, gx, a.class_id))
    return targets, records


def stack_targets(per_image: Sequence[list[LevelTargets]]) -> list[LevelTargets]:
    """Batch N per-image target lists into per-level (N, ., H, W) maps."""
    num_levels = len(per_image[0])
    out = []
    for l in range(num_levels):
        out.append(LevelTargets(
            cls=np.stack([im[l].cls for im in per_image]),
            box=np.stack([im[l].box for im in per_image]),
            pos=np.stack([im[l].pos for im in per_image])))
    return out


def focal_loss(logits: T.Tensor, targets: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, npos: Optional[int] = None) -> T.Tensor:
    """Focal binary classification loss, summed and divided by the
    positive count (at least 1).

    gamma=0, alpha=1 is plain sigmoid cross-entropy.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} vs logits {logits.shape}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if npos is None:
        npos = int(y.sum())
    yt = T.tensor(y)
    # softplus(-x) = softplus(x) - x, so ce for y in {0,1} collapses to:
    ce = T.sub(T.softplus(logits), T.mul(logits, yt))
    if gamma != 0.0:
        p = T.sigmoid(logits)
        py = T.mul(p, yt)
        # 1 - p_t = p + y - 2 p y
        one_minus_pt = T.add(T.sub(p, T.scale(py, 2.0)), yt)
        ce = T.mul(T.pow_const(one_minus_pt, gamma), ce)
    total = T.sum_all(ce)
    return T.scale(total, alpha / max(1, npos))


def box_loss(pred: T.Tensor, target: np.ndarray, pos: np.ndarray,
             npos: Optional[int] = None) -> T.Tensor:
    """Huber loss over the positive cells only, divided by max(1, npos)."""
    t = np.asarray(target, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(pos, dtype=np.float64), t.shape).copy()
    if npos is None:
        npos = int(np.asarray(pos).sum())
    err = T.sub(pred, T.tensor(t))
    per_cell = T.mul(T.huber(err), T.tensor(mask))
    return T.scale(T.sum_all(per_cell), 1.0 / max(1, npos))


def detection_losses(preds: Sequence[tuple[T.Tensor, T.Tensor]],
                     targets: Sequence[LevelTargets],
                     alpha: float = 0.25, gamma: float = 2.0,
                     box_weight: float = 1.0) -> dict:
    """Combined per-level losses.  Normalization uses the positive count
    over ALL levels so the per-level scalars sum exactly to the total.

    Returns {"total", "per_level", "cls", "box"}; per_level entries stay
    attached to the graph so a single branch can be backpropagated alone.
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} prediction levels vs {len(targets)} target levels")
    npos = sum(int(t.pos.sum()) for t in targets)
    per_level = []
    cls_val = 0.0
    box_val = 0.0
    for (cls_logits, box_pred), t in zip(preds, targets):
        lc = focal_loss(cls_logits, t.cls, alpha=alpha, gamma=gamma, npos=npos)
        lb = T.scale(box_loss(box_pred, t.box, t.pos, npos=npos), box_weight)
        cls_val += lc.item()
        box_val += lb.item()
        per_level.append(T.add(lc, lb))
    total = per_level[0]
    for lvl in per_level[1:]:
        total = T.add(total, lvl)
    return {"total": total, "per_level": per_level, "cls": cls_val, "box": box_val,
            "npos": npos}
