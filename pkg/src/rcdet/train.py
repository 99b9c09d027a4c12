"""Training loop, optimizer, and checkpoint round trip.

Plain SGD with momentum under a step-decay schedule: a short linear
warm-up (first 5% of all steps), then x0.1 at 2/3 and again at 11/12 of
the epoch budget.  Every epoch ends with an evaluation pass that records
losses, AP and the per-level interference energies into a trajectory row.

The single-branch form trains per image (its fusion factors are
per-image statistics) and accumulates the factor stack as it goes; the
finalized factor set ships with the checkpoint.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kdn, losses, tensor_io
from . import tensor as T
from .analysis import interference_metrics, saliency_from_result
from .detector import ToyDetector
from .evalap import APReport, evaluate_ap
from .rc import AddonFlags, ConnectionSpec


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 20
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    warmup_frac: float = 0.05
    decay_factor: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    box_weight: float = 1.0

    def decay_epochs(self) -> tuple[int, int]:
        return (math.floor(self.epochs * 2 / 3), math.floor(self.epochs * 11 / 12))


def learning_rate(settings: TrainSettings, epoch: int, step: int,
                  steps_per_epoch: int) -> float:
    """lr for one global step; `step` counts from 0 across all epochs."""
    lr = settings.base_lr
    d1, d2 = settings.decay_epochs()
    if epoch >= d1:
        lr *= settings.decay_factor
    if epoch >= d2:
        lr *= settings.decay_factor
    total = settings.epochs * steps_per_epoch
    warm = max(1, round(settings.warmup_frac * total))
    if step < warm:
        lr *= (step + 1) / warm
    return lr


class SGD:
    def __init__(self, params: Sequence[T.Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v -= lr * g
            p.data = p.data + v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrajectoryRow:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_box: float
    ap50: Optional[float]
    ap_small: Optional[float]
    interference: tuple  # per-level saliency energies on the test set


@dataclass
class TrainResult:
    detector: ToyDetector
    trajectory: list[TrajectoryRow] = field(default_factory=list)
    factor_set: Optional[kdn.FactorSet] = None


def _image_tensor(arrs: Sequence[np.ndarray]) -> T.Tensor:
    return T.tensor(np.stack(arrs))


def evaluate(detector: ToyDetector, dataset, image_size: int,
             factor_set: Optional[kdn.FactorSet] = None,
             batch_size: int = 16) -> tuple[APReport, tuple]:
    """AP plus mean per-level interference energies over a dataset."""
    geometry = detector.level_geometry(image_size)
    all_dets, all_gts = [], []
    energies = np.zeros(len(geometry))
    n_img = 0
    with T.no_grad():
        if detector.single_branch:
            for img, annots in dataset:
                casc = detector.backbone_cascade(T.tensor(img[None]))
                res = detector.forward_fused(casc, factor_set=factor_set)
                all_dets.extend(detector.decode(res.preds, image_size))
                all_gts.append(annots)
                sal = saliency_from_result(res)
                energies += interference_metrics(sal, annots, geometry)
                n_img += 1
        else:
            for start in range(0, len(dataset), batch_size):
                chunk = dataset[start:start + batch_size]
                res = detector.forward(_image_tensor([c[0] for c in chunk]))
                all_dets.extend(detector.decode(res.preds, image_size))
                for bi, (_, annots) in enumerate(chunk):
                    all_gts.append(annots)
                    sal = saliency_from_result(res, batch_index=bi)
                    energies += interference_metrics(sal, annots, geometry)
                    n_img += 1
    report = evaluate_ap(all_dets, all_gts)
    return report, tuple(float(e) / max(1, n_img) for e in energies)


def train(detector: ToyDetector, train_data, test_data,
          settings: TrainSettings, seed: int, image_size: int = 96,
          eval_every_epoch: bool = True) -> TrainResult:
    """Train in place; deterministic for a fixed (detector, data, seed)."""
    geometry = detector.level_geometry(image_size)
    opt = SGD(detector.parameters(), momentum=settings.momentum,
              weight_decay=settings.weight_decay)
    shuffle_rng = np.random.default_rng([seed, 17])
    steps_per_epoch = max(1, math.ceil(len(train_data) / settings.batch_size))
    result = TrainResult(detector=detector)
    stack = kdn.SalientStack() if detector.single_branch else None

    prepared = []
    for img, annots in train_data:
        tg, _ = losses.assign_targets(annots, geometry, detector.num_classes)
        prepared.append((img, annots, tg))

    global_step = 0
    for epoch in range(settings.epochs):
        order = shuffle_rng.permutation(len(prepared))
        ep_total = ep_cls = ep_box = 0.0
        nsteps = 0
        for start in range(0, len(order), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            lr = learning_rate(settings, epoch, global_step, steps_per_epoch)
            opt.zero_grad()
            try:
                if detector.single_branch:
                    ld = _single_branch_step(detector, prepared, idx, settings, stack)
                else:
                    imgs = _image_tensor([prepared[i][0] for i in idx])
                    targets = losses.stack_targets([prepared[i][2] for i in idx])
                    res = detector.forward(imgs)
                    ld = losses.detection_losses(
                        res.preds, targets, alpha=settings.focal_alpha,
                        gamma=settings.focal_gamma, box_weight=settings.box_weight)
                ld["total"].backward()
            except T.NonFiniteError as e:
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} step {global_step} "
                    f"(lr {lr:g}): {e}") from e
            opt.step(lr)
            ep_total += ld["total"].item()
            ep_cls += ld["cls"]
            ep_box += ld["box"]
            nsteps += 1
            global_step += 1

        fs = kdn.finalize(stack) if stack is not None and stack.count else None
        if eval_every_epoch:
            report, energies = evaluate(detector, test_data, image_size, factor_set=fs)
            ap50, ap_small = report.ap50, report.ap_small
        else:
            ap50, ap_small, energies = None, None, tuple([0.0] * len(geometry))
        result.trajectory.append(TrajectoryRow(
            epoch=epoch, loss_total=ep_total / nsteps, loss_cls=ep_cls / nsteps,
            loss_box=ep_box / nsteps, ap50=ap50, ap_small=ap_small,
            interference=energies))
        result.factor_set = fs
    if detector.single_branch and result.factor_set is None and stack.count:
        result.factor_set = kdn.finalize(stack)
    return result


def _single_branch_step(detector, prepared, idx, settings, stack):
    """Per-image forwards (factors are image statistics); losses averaged."""
    total = None
    cls_val = box_val = 0.0
    npos = 0
    used = 0
    for i in idx:
        img, annots, tg = prepared[i]
        if not annots:
            continue  # no objects, no factors, nothing to learn from
        casc = detector.backbone_cascade(T.tensor(img[None]))
        lam = kdn.image_factors(casc, annots)
        stack.update(lam)
        res = detector.forward_fused(casc, factors=lam)
        ld = losses.detection_losses(
            res.preds, losses.stack_targets([tg]), alpha=settings.focal_alpha,
            gamma=settings.focal_gamma, box_weight=settings.box_weight)
        total = ld["total"] if total is None else T.add(total, ld["total"])
        cls_val += ld["cls"]
        box_val += ld["box"]
        npos += ld["npos"]
        used += 1
    if total is None:
        raise TrainingDivergence("batch contained no annotated images")
    total = T.scale(total, 1.0 / used)
    return {"total": total, "cls": cls_val / used, "box": box_val / used, "npos": npos}


# --- checkpoints -----------------------------------------------------------

def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def save_checkpoint(dirpath, detector: ToyDetector, epoch: int,
                    config_hash: str = "", factor_set: Optional[kdn.FactorSet] = None) -> None:
    os.makedirs(os.path.join(dirpath, "params"), exist_ok=True)
    manifest: list[tuple[str, str]] = [
        ("epoch", str(epoch)),
        ("config_hash", config_hash or "unset"),
        ("num_classes", str(detector.num_classes)),
        ("num_levels", str(detector.num_levels)),
        ("pafpn", str(int(detector.pafpn))),
        ("seed", str(detector.seed)),
        ("stage_channels", " ".join(str(c) for c in detector.stage_channels)),
        ("stem_channels", str(detector.params["stem.weight"].shape[0])),
        ("pyramid_channels", str(detector.pyramid_channels)),
        ("head_channels", str(detector.params["head.weight"].shape[0])),
    ]
    spec = detector.connection
    if spec is None:
        manifest.append(("connection", "none"))
    else:
        manifest.append(("connection", spec.form))
        manifest.append(("connection_n", repr(float(spec.n))))
        manifest.append(("attach_point", spec.attach_point))
        manifest.append(("variant_uniform", str(int(spec.variant_uniform))))
        manifest.append(("addons", f"{int(spec.addons.projection_1x1)} "
                                   f"{int(spec.addons.norm)} {int(spec.addons.activation)}"))
        if spec.form == "complete":
            manifest.append(("matrix", _format_floats(spec.matrix)))
    if factor_set is not None:
        manifest.append(("factor_lam_infer", _format_floats(factor_set.lam_infer)))
        manifest.append(("factor_relevance",
                         " ".join(str(int(r)) for r in factor_set.relevance)))
        manifest.append(("factor_count", str(factor_set.count)))
    with open(os.path.join(dirpath, "manifest.txt"), "w") as f:
        for k, v in manifest:
            f.write(f"{k}: {v}\n")
    for name, p in detector.named_parameters().items():
        fname = name.replace(".", "_") + ".tsr"
        tensor_io.save_tensor(os.path.join(dirpath, "params", fname), p.data, name=name)


def load_checkpoint(dirpath) -> tuple[ToyDetector, dict, Optional[kdn.FactorSet]]:
    manifest: dict[str, str] = {}
    with open(os.path.join(dirpath, "manifest.txt")) as f:
        for line in f:
            k, _, v = line.rstrip("\n").partition(": ")
            manifest[k] = v

    spec = None
    if manifest["connection"] != "none":
        flags = [bool(int(t)) for t in manifest["addons"].split()]
        matrix = None
        if "matrix" in manifest:
            matrix = np.array([float(t) for t in manifest["matrix"].split()]).reshape(4, 4)
        spec = ConnectionSpec(
            form=manifest["connection"], n=float(manifest["connection_n"]),
            matrix=matrix, addons=AddonFlags(*flags),
            attach_point=manifest["attach_point"],
            variant_uniform=bool(int(manifest["variant_uniform"])))

    det = ToyDetector(
        num_classes=int(manifest["num_classes"]),
        num_levels=int(manifest["num_levels"]) if manifest["connection"] != "single_branch" else 3,
        connection=spec, pafpn=bool(int(manifest["pafpn"])),
        seed=int(manifest["seed"]),
        stem_channels=int(manifest["stem_channels"]),
        stage_channels=tuple(int(c) for c in manifest["stage_channels"].split()),
        pyramid_channels=int(manifest["pyramid_channels"]),
        head_channels=int(manifest["head_channels"]))

    named = det.named_parameters()
    for name, p in named.items():
        fname = name.replace(".", "_") + ".tsr"
        stored_name, arr = tensor_io.load_tensor(os.path.join(dirpath, "params", fname))
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint {name}: shape {arr.shape} != model {p.shape}")
        p.data = arr

    fs = None
    if "factor_lam_infer" in manifest:
        lam = np.array([float(t) for t in manifest["factor_lam_infer"].split()])
        rel = [bool(int(t)) for t in manifest["factor_relevance"].split()]
        fs = kdn.FactorSet(lam_infer=lam, relevance=rel,
                           count=int(manifest["factor_count"]))
    return det, manifest, fs
