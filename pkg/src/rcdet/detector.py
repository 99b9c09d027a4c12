"""Desk-scale multi-branch detector.

Backbone: three stride-2 stages over a stride-2 stem (so the cascade
sits at strides 4 / 8 / 16).  Neck: lateral 1x1 merges with top-down
upsampling, optionally followed by a bottom-up path.  Heads are shared
across branches.  A connection block (see rc.py) may rewrite the branch
inputs; without one the branches consume the pyramid directly.

The single_branch form replaces the multi-branch neck entirely: backbone
levels are projected, factor-weighted and fused onto the finest grid,
and one head runs there (factors come from the statistics pipeline in
kdn.py, supplied by the caller).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .connections import FeatureCascade
from .evalap import iou_xywh
from .kdn import FactorSet, fuse_infer, fuse_train
from .losses import decode_box
from .rc import AddonModule, ConnectionSpec, apply_connection, raw_coefficients

PRIOR_P = 0.01  # initial foreground probability for the class head bias


@dataclass
class Detection:
    x: float
    y: float
    w: float
    h: float
    score: float
    class_id: int
    source_level: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class ForwardResult:
    preds: list  # per level: (cls logits (N,C,H,W), box preds (N,4,H,W))
    head_inputs: list
    pyramid: list
    factors: Optional[np.ndarray] = None  # per-image fusion factors (single branch)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def _orthogonal_1x1(rng: np.random.Generator, cout: int, cin: int) -> np.ndarray:
    a = rng.normal(size=(max(cout, cin), min(cout, cin)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if cout >= cin:
        w = q[:cout, :cin]
    else:
        w = q[:cin, :cout].T
    return w.reshape(cout, cin, 1, 1)


class ToyDetector:
    """See module docstring.  All parameters are float64 graph tensors;
    construction is a pure function of the seed."""

    def __init__(self, num_classes: int = 2, num_levels: int = 3,
                 connection: Optional[ConnectionSpec] = None,
                 pafpn: bool = False, seed: int = 0,
                 stem_channels: int = 8, stage_channels: tuple = (12, 16, 16),
                 pyramid_channels: int = 12, head_channels: int = 12):
        if num_levels not in (3, 4):
            raise ValueError(f"num_levels must be 3 or 4, got {num_levels}")
        self.connection = connection
        self.pafpn = pafpn
        self.num_classes = num_classes
        self.seed = seed
        self.stage_channels = tuple(stage_channels)
        self.pyramid_channels = pyramid_channels
        self.single_branch = connection is not None and connection.form == "single_branch"
        if connection is not None and not self.single_branch:
            if connection.form == "complete" and num_levels != 4:
                raise ValueError("the complete form needs a 4-level pyramid")
            if connection.attach_point == "bottomup_out" and not pafpn:
                raise ValueError("bottomup_out attach point requires the bottom-up path")
        self.num_levels = 1 if self.single_branch else num_levels

        rng = np.random.default_rng(seed)
        p: dict[str, T.Tensor] = {}

        def conv(name, cout, cin, k, bias=True, bias_value=0.0):
            p[name + ".weight"] = T.tensor(_he_conv(rng, cout, cin, k),
                                           requires_grad=True, name=name + ".weight")
            if bias:
                p[name + ".bias"] = T.tensor(np.full(cout, bias_value),
                                             requires_grad=True, name=name + ".bias")

        sc = stem_channels
        c1, c2, c3 = stage_channels
        conv("stem", sc, 1, 3)
        conv("stage1", c1, sc, 3)
        conv("stage2", c2, c1, 3)
        conv("stage3", c3, c2, 3)

        pc = pyramid_channels
        if self.single_branch:
            for i, cin in enumerate(stage_channels):
                p[f"proj{i}.weight"] = T.tensor(_orthogonal_1x1(rng, pc, cin),
                                                requires_grad=True, name=f"proj{i}.weight")
        else:
            conv("lat0", pc, c1, 1)
            conv("lat1", pc, c2, 1)
            conv("lat2", pc, c3, 1)
            if pafpn:
                conv("down0", pc, pc, 3)
                conv("down1", pc, pc, 3)

        hc = head_channels
        conv("head", hc, pc, 3)
        cls_bias = -math.log((1.0 - PRIOR_P) / PRIOR_P)
        conv("cls", num_classes, hc, 1, bias_value=cls_bias)
        conv("box", 4, hc, 1)

        self.params = p
        self.addon = None
        if connection is not None and connection.addons.any() and not self.single_branch:
            gain = float(np.sum(raw_coefficients(connection) ** 2))
            self.addon = AddonModule(pc, connection.addons, norm_var=gain)

    def parameters(self) -> list[T.Tensor]:
        out = list(self.params.values())
        if self.addon is not None:
            out.extend(self.addon.parameters())
        return out

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = dict(self.params)
        if self.addon is not None:
            for i, t in enumerate(self.addon.parameters()):
                out[f"addon.{i}"] = t
        return out

    # --- geometry ----------------------------------------------------------

    def level_geometry(self, image_size: int) -> list[tuple[int, int, int]]:
        dims = []
        n = image_size
        for _ in range(5):
            n = (n + 1) // 2  # stride-2 3x3 conv with pad 1 keeps ceil(n/2)
            dims.append(n)
        if self.single_branch:
            return [(4, dims[1], dims[1])]
        geo = [(4 * 2 ** i, dims[1 + i], dims[1 + i]) for i in range(3)]
        if self.num_levels == 4:
            geo.append((32, dims[4], dims[4]))
        return geo

    # --- forward pieces ----------------------------------------------------

    def _conv(self, x, name, stride=1, pad=1, relu=True):
        w = self.params[name + ".weight"]
        b = self.params.get(name + ".bias")
        out = T.conv2d(x, w, b, stride=stride, pad=pad)
        return T.relu(out) if relu else out

    def backbone(self, images: T.Tensor) -> list[T.Tensor]:
        x = self._conv(images, "stem", stride=2)
        c1 = self._conv(x, "stage1", stride=2)
        c2 = self._conv(c1, "stage2", stride=2)
        c3 = self._conv(c2, "stage3", stride=2)
        return [c1, c2, c3]

    def _neck(self, feats: list[T.Tensor]) -> tuple[list[T.Tensor], Optional[list[T.Tensor]]]:
        lats = [self._conv(f, f"lat{i}", pad=0, relu=False) for i, f in enumerate(feats)]
        td = [None, None, lats[2]]
        for i in (1, 0):
            h, w = lats[i].shape[-2:]
            td[i] = T.add(lats[i], T.bilinear_resize(td[i + 1], h, w))
        if not self.pafpn:
            return td, None
        bu = [td[0]]
        for i in (0, 1):
            down = self._conv(bu[-1], f"down{i}", stride=2, relu=False)
            bu.append(T.add(down, td[i + 1]))
        return td, bu

    def _heads(self, head_inputs: Sequence[T.Tensor]) -> list[tuple[T.Tensor, T.Tensor]]:
        preds = []
        for x in head_inputs:
            h = self._conv(x, "head")
            cls = self._conv(h, "cls", pad=0, relu=False)
            box = self._conv(h, "box", pad=0, relu=False)
            preds.append((cls, box))
        return preds

    def _with_extra_level(self, levels: list[T.Tensor]) -> list[T.Tensor]:
        if self.num_levels != 4:
            return levels
        h, w = levels[-1].shape[-2:]
        p6 = T.bilinear_resize(levels[-1], (h + 1) // 2, (w + 1) // 2)
        return levels + [p6]

    def forward(self, images: T.Tensor, detach_mode: Optional[str] = None) -> ForwardResult:
        """Multi-branch forward.  detach_mode splits the connection's
        gradient paths; forward values never change."""
        if self.single_branch:
            raise RuntimeError("single-branch form: use forward_fused()")
        td, bu = self._neck(self.backbone(images))
        base = bu if self.pafpn else td
        base = self._with_extra_level(base)
        spec = self.connection
        if spec is None:
            if detach_mode is not None:
                raise ValueError("detach_mode needs a connection")
            head_inputs = base
        else:
            if spec.attach_point == "topdown_out" and self.pafpn:
                source = self._with_extra_level(td)
            else:
                # without a bottom-up path both attach points read the same
                # pyramid; with one, bottomup_out reads it directly
                source = base
            strides = [4 * 2 ** i for i in range(len(source))]
            casc = FeatureCascade(source, strides)
            out = apply_connection(casc, spec, addon=self.addon, detach_mode=detach_mode)
            if spec.form == "complete":
                head_inputs = out
            else:
                head_inputs = [out[0]] + base[1:]
        return ForwardResult(preds=self._heads(head_inputs), head_inputs=head_inputs,
                             pyramid=base)

    # --- single-branch path -------------------------------------------------

    def backbone_cascade(self, images: T.Tensor) -> FeatureCascade:
        return FeatureCascade(self.backbone(images), [4, 8, 16])

    def projections(self):
        return [(lambda t, w=self.params[f"proj{i}.weight"]: T.conv2d(t, w))
                for i in range(3)]

    def forward_fused(self, cascade: FeatureCascade, factors=None,
                      factor_set: Optional[FactorSet] = None) -> ForwardResult:
        """Single-branch forward from a backbone cascade.  Pass per-image
        `factors` during training or a finalized `factor_set` for inference."""
        if not self.single_branch:
            raise RuntimeError("multi-branch form: use forward()")
        if (factors is None) == (factor_set is None):
            raise ValueError("exactly one of factors / factor_set required")
        projs = self.projections()
        if factors is not None:
            fused = fuse_train(cascade, factors, projections=projs)
        else:
            fused = fuse_infer(cascade, factor_set, projections=projs)
        return ForwardResult(preds=self._heads([fused]), head_inputs=[fused],
                             pyramid=list(cascade.levels),
                             factors=None if factors is None else np.asarray(factors))

    # --- decoding -----------------------------------------------------------

    def decode(self, preds, image_size: int, score_thresh: float = 0.05,
               topk: int = 100, nms_iou: float = 0.5) -> list[list[Detection]]:
        """Batched predictions -> per-image detection lists (score-sorted)."""
        geometry = self.level_geometry(image_size)
        batch = preds[0][0].shape[0]
        out = []
        for b in range(batch):
            cands: list[Detection] = []
            for l, ((cls_logits, box_pred), (stride, gh, gw)) in enumerate(zip(preds, geometry)):
                with T.no_grad():
                    scores = 1.0 / (1.0 + np.exp(-cls_logits.data[b]))
                boxes = box_pred.data[b]
                for c in range(self.num_classes):
                    sc = scores[c]
                    ys, xs = np.nonzero(sc > score_thresh)
                    if ys.size > topk:
                        keep = np.argsort(-sc[ys, xs], kind="stable")[:topk]
                        ys, xs = ys[keep], xs[keep]
                    for y, x in zip(ys.tolist(), xs.tolist()):
                        bx, by, bw, bh = decode_box(y, x, boxes[:, y, x], stride)
                        bx2, by2 = min(bx + bw, image_size), min(by + bh, image_size)
                        bx, by = max(bx, 0.0), max(by, 0.0)
                        if bx2 - bx < 1e-3 or by2 - by < 1e-3:
                            continue
                        cands.append(Detection(bx, by, bx2 - bx, by2 - by,
                                               float(sc[y, x]), c, l))
            cands.sort(key=lambda d: (-d.score, d.source_level, d.class_id, d.y, d.x))
            kept: list[Detection] = []
            for d in cands:
                if any(k.class_id == d.class_id and iou_xywh(k.box, d.box) >= nms_iou
                       for k in kept):
                    continue
                kept.append(d)
                if len(kept) >= topk:
                    break
            out.append(kept)
        return out
