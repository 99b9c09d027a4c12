"""Inspection utilities: per-level saliency, focus/interference energies,
and an additive split of a shared parameter's gradient.

The gradient check exploits that the small-object branch's loss reaches a
shallow shared weight through exactly two path families once a connection
is active: the branch's native level and the levels the connection mixed
in.  Detaching one family at a time yields both parts; their sum must
reproduce the full gradient bit-for-bit up to float addition order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from . import tensor as T
from .kdn import ObjectAnnotation, project_region


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map has no range and goes to zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def saliency_from_result(result, batch_index: int = 0,
                         normalize: bool = True) -> list[np.ndarray]:
    """Channel-max of every head input for one image of a forward result."""
    maps = []
    for t in result.head_inputs:
        m = t.data[batch_index].max(axis=0)
        maps.append(normalize_map(m) if normalize else m)
    return maps


def saliency_maps(detector, image: np.ndarray, factor_set=None) -> list[np.ndarray]:
    """Per-level (H, W) saliency for a single (C, H, W) image."""
    x = T.tensor(np.asarray(image, dtype=np.float64)[None])
    with T.no_grad():
        if detector.single_branch:
            res = detector.forward_fused(detector.backbone_cascade(x),
                                         factor_set=factor_set)
        else:
            res = detector.forward(x)
    return saliency_from_result(res)


def interference_metrics(saliency: Sequence[np.ndarray],
                         annots: Sequence[ObjectAnnotation],
                         geometry: Sequence[tuple]) -> np.ndarray:
    """Per-level energy: mean saliency inside the ground-truth cells when
    the level owns at least one object (focus), mean outside them when it
    owns none (interference).  An empty selection scores 0."""
    num_levels = len(geometry)
    owned = {losses.level_for_object(a, num_levels) for a in annots}
    out = np.zeros(num_levels)
    for l, (sal, (stride, h, w)) in enumerate(zip(saliency, geometry)):
        sal = np.asarray(sal)
        if sal.shape != (h, w):
            raise ValueError(f"level {l}: saliency {sal.shape} vs grid {(h, w)}")
        mask = np.zeros((h, w), dtype=bool)
        for a in annots:
            cx, cy, cw, ch = project_region(a.box, stride, h, w)
            mask[cy:cy + ch, cx:cx + cw] = True
        sel = sal[mask] if l in owned else sal[~mask]
        out[l] = float(sel.mean()) if sel.size else 0.0
    return out


@dataclass
class GradDecomposition:
    param: str
    residual: float        # max |full - (own + added)|
    norm_full: float
    norm_own: float
    norm_added: float
    norm_baseline: float   # same loss, same weights, no connection
    norm_ratio: float      # norm_full / norm_baseline


def grad_decomposition_check(detector, images, annots_per_image,
                             param: str = "stem.weight",
                             loss_fn: Optional[Callable] = None,
                             tol: float = 1e-8) -> GradDecomposition:
    """Split the small-object branch's gradient of one shared parameter
    into its native-path and connection-added parts and verify they sum
    to the full gradient within `tol`.

    `loss_fn(result) -> scalar Tensor` overrides the default branch loss.
    Raises ValueError when the detector has no path-splittable connection.
    """
    spec = detector.connection
    if spec is None or detector.single_branch or spec.form == "complete":
        raise ValueError("gradient split needs an economical or variant connection")

    x = images if isinstance(images, T.Tensor) else T.tensor(np.asarray(images))
    geometry = detector.level_geometry(x.shape[-1])
    targets = losses.stack_targets(
        [losses.assign_targets(a, geometry, detector.num_classes)[0]
         for a in annots_per_image])

    def branch_grad(net, detach_mode):
        for p in net.parameters():
            p.grad = None
        res = net.forward(x, detach_mode=detach_mode)
        if loss_fn is not None:
            loss = loss_fn(res)
        else:
            loss = losses.detection_losses(res.preds, targets)["per_level"][0]
        loss.backward()
        g = net.named_parameters()[param].grad
        return np.zeros(net.named_parameters()[param].shape) if g is None else g.copy()

    g_full = branch_grad(detector, None)
    g_own = branch_grad(detector, "extra")   # added paths cut
    g_added = branch_grad(detector, "own")   # native path cut
    residual = float(np.max(np.abs(g_full - (g_own + g_added))))
    if residual > tol:
        raise ValueError(f"gradient split residual {residual:g} exceeds {tol:g}")

    baseline = type(detector)(
        num_classes=detector.num_classes, num_levels=detector.num_levels,
        connection=None, pafpn=detector.pafpn, seed=detector.seed,
        stem_channels=detector.params["stem.weight"].shape[0],
        stage_channels=detector.stage_channels,
        pyramid_channels=detector.pyramid_channels,
        head_channels=detector.params["head.weight"].shape[0])
    shared = baseline.named_parameters()
    for name, p in detector.named_parameters().items():
        if name in shared:
            shared[name].data = p.data.copy()
    g_base = branch_grad(baseline, None)

    norm_full = float(np.linalg.norm(g_full))
    norm_base = float(np.linalg.norm(g_base))
    return GradDecomposition(
        param=param, residual=residual, norm_full=norm_full,
        norm_own=float(np.linalg.norm(g_own)),
        norm_added=float(np.linalg.norm(g_added)),
        norm_baseline=norm_base,
        norm_ratio=norm_full / norm_base if norm_base > 0 else float("inf"))
