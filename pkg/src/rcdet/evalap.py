"""Average-precision evaluation with greedy IoU matching.

Matching is per image: detections in descending score order each claim
the best-overlapping unmatched ground truth of their class (if the IoU
clears the threshold).  Precision-recall is integrated at 101 evenly
spaced recall points with interpolated (running-max) precision.

Size buckets follow the usual area convention: small < 32^2,
medium < 96^2, large above.  A bucket with neither ground truth nor
detections has no defined AP and is reported as None.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SMALL_AREA = 32.0 ** 2
MEDIUM_AREA = 96.0 ** 2


def iou_xywh(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class APReport:
    ap50: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    n_gt: int
    n_det: int

    def __post_init__(self):
        for v in (self.ap50, self.ap_small, self.ap_medium, self.ap_large):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"AP {v} outside [0, 1]")


def _size_bucket(w: float, h: float) -> str:
    area = w * h
    if area < SMALL_AREA:
        return "small"
    if area < MEDIUM_AREA:
        return "medium"
    return "large"


def match_image(dets, gts, iou_thresh: float) -> list[int]:
    """Greedy matching for one image.  `dets` must be score-sorted
    descending; returns the claimed ground-truth index per detection
    (-1 when unmatched).  On IoU ties the earliest ground truth wins."""
    claimed = [False] * len(gts)
    out = []
    for d in dets:
        best, best_iou = -1, iou_thresh - 1e-10
        for gi, g in enumerate(gts):
            if claimed[gi] or g.class_id != d.class_id:
                continue
            v = iou_xywh(d.box, g.box)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            claimed[best] = True
        out.append(best)
    return out


def _interpolated_ap(scores: np.ndarray, matched: np.ndarray, n_gt: int) -> Optional[float]:
    if n_gt == 0 and scores.size == 0:
        return None
    if n_gt == 0:
        return 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    m = matched[order]
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # running max from the right = interpolated precision
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += interp[idx] if idx < interp.size else 0.0
    return ap / 101.0


def evaluate_ap(detections_per_image: Sequence[Sequence],
                gts_per_image: Sequence[Sequence],
                iou_thresh: float = 0.5) -> APReport:
    """COCO-flavored AP over a set of images.

    `detections_per_image[i]` and `gts_per_image[i]` describe image i;
    detections need .box/.score/.class_id, ground truths .box/.class_id.
    """
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("image count mismatch")
    scores, matched, buckets = [], [], []
    gt_bucket_counts = {"small": 0, "medium": 0, "large": 0}
    n_gt = 0
    for dets, gts in zip(detections_per_image, gts_per_image):
        dets = sorted(dets, key=lambda d: -d.score)
        assigned = match_image(dets, gts, iou_thresh)
        for d, gi in zip(dets, assigned):
            scores.append(d.score)
            matched.append(gi >= 0)
            # a matched detection counts in its ground truth's bucket
            ref = gts[gi].box if gi >= 0 else d.box
            buckets.append(_size_bucket(ref[2], ref[3]))
        n_gt += len(gts)
        for g in gts:
            gt_bucket_counts[_size_bucket(g.box[2], g.box[3])] += 1

    scores = np.asarray(scores, dtype=np.float64)
    matched = np.asarray(matched, dtype=bool)
    buckets_arr = np.asarray(buckets)

    ap50 = _interpolated_ap(scores, matched, n_gt)
    by_size = {}
    for name in ("small", "medium", "large"):
        sel = buckets_arr == name if buckets_arr.size else np.zeros(0, dtype=bool)
        by_size[name] = _interpolated_ap(scores[sel], matched[sel],
                                         gt_bucket_counts[name])
    return APReport(ap50=ap50, ap_small=by_size["small"],
                    ap_medium=by_size["medium"], ap_large=by_size["large"],
                    n_gt=n_gt, n_det=int(scores.size))
