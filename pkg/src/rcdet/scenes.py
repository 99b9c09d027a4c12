"""Synthetic scenes for scale-preferred detection experiments.

A scene is a single-channel image with a handful of bright shapes on a
noisy background.  Two shape classes (rectangle, ellipse) double as the
class labels.  In tiny mode every annotated object stays small (3-8 px
by default) while unannotated distractors, the same shapes at 4-8x the
size, sit in the background.  Distractors are the point: they are what a
coarse pyramid level fires on even though nothing up there is a target.

All randomness flows through an explicit generator, so a dataset is a
pure function of its spec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import tensor_io
from .kdn import ObjectAnnotation


class PlacementError(RuntimeError):
    """Could not fit the requested object count into the image."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    size_range: tuple[float, float] = (3.0, 8.0)       # annotated object sides, px
    density: int = 3                                   # objects per image
    distractor_count: int = 2
    distractor_scale: tuple[float, float] = (4.0, 8.0)  # multiple of max object side
    noise_level: float = 0.02
    amplitude_range: tuple[float, float] = (0.5, 1.0)
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} too small")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad size_range {self.size_range}")
        if self.density < 0 or self.distractor_count < 0:
            raise ValueError("density and distractor_count must be >= 0")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not 1 <= self.num_classes <= 2:
            raise ValueError("num_classes must be 1 or 2")


def diversified_spec(**kw) -> SceneSpec:
    """Scale-diversified twin of the default (tiny) spec: wide size band,
    no distractors."""
    kw.setdefault("size_range", (3.0, 48.0))
    kw.setdefault("distractor_count", 0)
    return SceneSpec(**kw)


def _draw_shape(img: np.ndarray, x: float, y: float, w: float, h: float,
                class_id: int, amplitude: float) -> None:
    n = img.shape[0]
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = min(int(round(x + w)), n), min(int(round(y + h)), n)
    if class_id == 0:
        img[y0:y1, x0:x1] += amplitude
    else:
        yy, xx = np.mgrid[y0:y1, x0:x1]
        cx, cy = x + w / 2.0, y + h / 2.0
        rx, ry = max(w / 2.0, 0.5), max(h / 2.0, 0.5)
        mask = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
        img[y0:y1, x0:x1][mask] += amplitude


def _overlaps(box, placed, margin: float = 1.0) -> bool:
    x, y, w, h = box
    for (px, py, pw, ph) in placed:
        if (x < px + pw + margin and px < x + w + margin and
                y < py + ph + margin and py < y + h + margin):
            return True
    return False


def generate_scene(spec: SceneSpec, rng: np.random.Generator,
                   max_tries: int = 60) -> tuple[T.Tensor, list[ObjectAnnotation]]:
    """One image plus its annotations.  Distractors are drawn but never
    annotated.  Raises PlacementError when the density cannot be met."""
    n = spec.image_size
    img = np.zeros((n, n))

    for _ in range(spec.distractor_count):
        side_lo = spec.distractor_scale[0] * spec.size_range[1]
        side_hi = spec.distractor_scale[1] * spec.size_range[1]
        w = float(rng.uniform(side_lo, min(side_hi, n - 2)))
        h = float(rng.uniform(side_lo, min(side_hi, n - 2)))
        x = float(rng.uniform(0, n - w))
        y = float(rng.uniform(0, n - h))
        cls = int(rng.integers(0, spec.num_classes))
        amp = float(rng.uniform(*spec.amplitude_range))
        _draw_shape(img, x, y, w, h, cls, amp)

    annots: list[ObjectAnnotation] = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(spec.density):
        for attempt in range(max_tries):
            w = float(rng.uniform(*spec.size_range))
            h = float(rng.uniform(*spec.size_range))
            x = float(rng.uniform(0, n - w))
            y = float(rng.uniform(0, n - h))
            if not _overlaps((x, y, w, h), placed):
                break
        else:
            raise PlacementError(
                f"could not place object {len(annots) + 1}/{spec.density} "
                f"after {max_tries} tries (image {n}px)")
        cls = int(rng.integers(0, spec.num_classes))
        amp = float(rng.uniform(*spec.amplitude_range))
        _draw_shape(img, x, y, w, h, cls, amp)
        placed.append((x, y, w, h))
        annots.append(ObjectAnnotation(x, y, w, h, class_id=cls))

    if spec.noise_level > 0:
        img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return T.tensor(img[None, :, :]), annots


def make_dataset(spec: SceneSpec, count: int,
                 salt: int = 0) -> list[tuple[np.ndarray, list[ObjectAnnotation]]]:
    """`count` scenes as (image array (1,H,W), annotations) pairs.  The
    same (spec.seed, salt) always reproduces the same scenes."""
    rng = np.random.default_rng([spec.seed, salt])
    out = []
    for _ in range(count):
        img, annots = generate_scene(spec, rng)
        out.append((img.data, annots))
    return out


# --- directory round trip --------------------------------------------------

def save_split(dirpath: str | os.PathLike, scenes) -> None:
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    for i, (img, annots) in enumerate(scenes):
        fname = f"img_{i:04d}.tsr"
        tensor_io.save_tensor(os.path.join(dirpath, fname), img, name=fname[:-4])
        for a in annots:
            # repr keeps the floats round-trip exact
            lines.append(f"{fname} {a.x!r} {a.y!r} {a.w!r} {a.h!r} {a.class_id}")
    with open(os.path.join(dirpath, "annotations.txt"), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_split(dirpath: str | os.PathLike) -> list[tuple[np.ndarray, list[ObjectAnnotation]]]:
    by_image: dict[str, list[ObjectAnnotation]] = {}
    with open(os.path.join(dirpath, "annotations.txt")) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            fname, x, y, w, h, cls = line.split()
            by_image.setdefault(fname, []).append(
                ObjectAnnotation(float(x), float(y), float(w), float(h), int(cls)))
    out = []
    for fname in sorted(fn for fn in os.listdir(dirpath) if fn.endswith(".tsr")):
        _, img = tensor_io.load_tensor(os.path.join(dirpath, fname))
        out.append((img, by_image.get(fname, [])))
    return out


def save_dataset(dirpath: str | os.PathLike, train, test, spec: SceneSpec) -> None:
    os.makedirs(dirpath, exist_ok=True)
    meta = {
        "image_size": spec.image_size,
        "num_classes": spec.num_classes,
        "train_count": len(train),
        "test_count": len(test),
        "seed": spec.seed,
    }
    with open(os.path.join(dirpath, "meta.txt"), "w") as f:
        for k, v in meta.items():
            f.write(f"{k}: {v}\n")
    save_split(os.path.join(dirpath, "train"), train)
    save_split(os.path.join(dirpath, "test"), test)


def load_dataset(dirpath: str | os.PathLike):
    """Returns (meta dict, train scenes, test scenes)."""
    meta = {}
    with open(os.path.join(dirpath, "meta.txt")) as f:
        for line in f:
            k, _, v = line.strip().partition(": ")
            meta[k] = int(v)
    train = load_split(os.path.join(dirpath, "train"))
    test = load_split(os.path.join(dirpath, "test"))
    return meta, train, test
