"""Connection blocks for multi-branch pyramids.

Three wiring shapes over a pyramid {P3, P4, P5(, P6)}:

  economical  - rewrite the three finest levels into bases and feed the
                strength-weighted sum to the small-object branch only;
                the other branches see their levels untouched.
  complete    - every branch receives a strength-matrix-weighted sum of
                all (resampled) levels; raw levels, not bases.
  variant     - economical restricted to a pair of levels (small+mid or
                small+large), two-basis construction.

Strengths follow the (n, 2, 1) family; n tunes only the finest basis.
The blocks are parameter-free unless add-ons (1x1 conv, fixed-stats
norm, ReLU) are switched on.

``detach_mode`` exists for gradient accounting: "extra" cuts the graph
edges through the coarser levels (keeping what a plain detector would
have), "own" cuts the branch's native level (keeping only what the
connection added).  Forward values are unchanged either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .connections import (FeatureCascade, align_cascade, bases_from_cascade,
                          combine, factors_from_strengths, uniform_strengths)

FORMS = ("single_branch", "economical", "complete", "variant_sm", "variant_sl")
ATTACH_POINTS = ("topdown_out", "bottomup_out")

# adaptive-pooling-flavored strength matrix for the complete form:
# rows = destination branches (small-object branch first),
# columns = source pyramid levels (finest first)
COMPLETE_MATRIX = np.array([
    [1.0, 0.15, 0.10, 0.10],
    [1.0, 0.30, 0.30, 0.25],
    [1.0, 0.25, 0.25, 0.25],
    [0.0, 0.30, 0.35, 0.40],
])


@dataclass(frozen=True)
class AddonFlags:
    projection_1x1: bool = False
    norm: bool = False
    activation: bool = False

    def any(self) -> bool:
        return self.projection_1x1 or self.norm or self.activation


@dataclass(frozen=True)
class ConnectionSpec:
    form: str = "economical"
    n: float = 4.0
    matrix: Optional[np.ndarray] = None
    addons: AddonFlags = field(default_factory=AddonFlags)
    attach_point: str = "topdown_out"
    variant_uniform: bool = False  # use 2-level uniform-factor strengths (2,1)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown connection form {self.form!r}")
        if self.attach_point not in ATTACH_POINTS:
            raise ValueError(f"unknown attach point {self.attach_point!r}")
        if self.form == "complete":
            m = COMPLETE_MATRIX if self.matrix is None else np.asarray(self.matrix, float)
            if m.shape != (4, 4):
                raise ValueError(f"complete form needs a 4x4 matrix, got {m.shape}")
            object.__setattr__(self, "matrix", m)
        elif self.matrix is not None:
            raise ValueError(f"matrix is only meaningful for the complete form")
        if self.form in ("economical", "variant_sm", "variant_sl") and not self.n > 0:
            raise ValueError(f"n must be positive, got {self.n}")

    def strengths(self) -> np.ndarray:
        """Basis strengths for the economical / variant forms."""
        if self.form == "economical":
            return np.array([self.n, 2.0, 1.0])
        if self.form in ("variant_sm", "variant_sl"):
            if self.variant_uniform:
                return uniform_strengths(2)
            return np.array([self.n, 2.0])
        raise ValueError(f"form {self.form} has no strength vector")


def raw_coefficients(spec: ConnectionSpec) -> np.ndarray:
    """Finest-branch weights on the raw (aligned) levels: the per-level
    factors of the strength vector, or the finest matrix row for the
    complete form."""
    if spec.form == "complete":
        return np.asarray(spec.matrix[0], dtype=np.float64)
    return factors_from_strengths(spec.strengths())


class AddonModule:
    """Optional post-connection stack: 1x1 conv -> norm -> ReLU.

    The conv starts at identity.  The norm runs on fixed statistics:
    mean 0 and a variance equal to the combination's structural gain
    (sum of squared raw-level coefficients), so a merge of L unit-scale
    levels comes out at unit scale again.
    """

    def __init__(self, channels: int, flags: AddonFlags, norm_var: float = 1.0):
        self.flags = flags
        self.channels = channels
        if flags.projection_1x1:
            w = np.zeros((channels, channels, 1, 1))
            w[np.arange(channels), np.arange(channels), 0, 0] = 1.0
            self.weight = T.tensor(w, requires_grad=True, name="addon.weight")
            self.bias = T.tensor(np.zeros(channels), requires_grad=True, name="addon.bias")
        else:
            self.weight = None
            self.bias = None
        self.norm_mean = np.zeros(channels)
        self.norm_var = np.full(channels, float(norm_var))

    def parameters(self) -> list[T.Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if self.flags.projection_1x1:
            x = T.conv2d(x, self.weight, self.bias)
        if self.flags.norm:
            x = T.batch_norm_infer(x, self.norm_mean, self.norm_var)
        if self.flags.activation:
            x = T.relu(x)
        return x


def _maybe_detach(levels: list[T.Tensor], detach_mode: Optional[str],
                  own: int) -> list[T.Tensor]:
    if detach_mode is None:
        return levels
    if detach_mode == "extra":
        return [t if i == own else t.detach() for i, t in enumerate(levels)]
    if detach_mode == "own":
        return [t.detach() if i == own else t for i, t in enumerate(levels)]
    raise ValueError(f"unknown detach_mode {detach_mode!r}")


def economical(cascade: FeatureCascade, spec: ConnectionSpec,
               addon: Optional[AddonModule] = None,
               detach_mode: Optional[str] = None) -> list[T.Tensor]:
    """Renormalize the finest level; pass the rest through untouched.

    Returns [P3', P4, P5, ...]: coarser levels are the same tensor
    objects that came in.
    """
    work = cascade.levels[:3]
    work = _maybe_detach(work, detach_mode, own=0)
    sub = FeatureCascade(work, cascade.strides[:3])
    bases = bases_from_cascade(align_cascade(sub))
    p3 = combine(bases, spec.strengths())
    if addon is not None:
        p3 = addon(p3)
    return [p3] + list(cascade.levels[1:])


def variant(cascade: FeatureCascade, spec: ConnectionSpec,
            addon: Optional[AddonModule] = None,
            detach_mode: Optional[str] = None) -> list[T.Tensor]:
    """Two-level economical form: the finest level plus one partner."""
    partner = {"variant_sm": 1, "variant_sl": 2}[spec.form]
    pair = [cascade.levels[0], cascade.levels[partner]]
    pair = _maybe_detach(pair, detach_mode, own=0)
    if pair[0].shape[-3] != pair[1].shape[-3]:
        raise ValueError("variant forms need a shared channel count")
    th, tw = pair[0].shape[-2:]
    aligned = [pair[0], T.bilinear_resize(pair[1], th, tw)]
    bases = [aligned[0], T.sub(aligned[1], aligned[0])]
    p3 = combine(bases, spec.strengths())
    if addon is not None:
        p3 = addon(p3)
    return [p3] + list(cascade.levels[1:])


def complete(cascade: FeatureCascade, matrix=None,
             addon: Optional[AddonModule] = None) -> list[T.Tensor]:
    """Every branch j gets sum_i C[j][i] * (P_i resampled to grid j).

    Coefficients 0 contribute no term and coefficient 1 adds the level
    as-is, so the identity matrix returns the input tensors themselves.
    """
    m = COMPLETE_MATRIX if matrix is None else np.asarray(matrix, dtype=np.float64)
    k = len(cascade)
    if m.shape != (k, k):
        raise ValueError(f"matrix {m.shape} does not fit a {k}-level cascade")
    out = []
    for j in range(k):
        th, tw = cascade.levels[j].shape[-2:]
        acc = None
        for i in range(k):
            cji = m[j, i]
            if cji == 0.0:
                continue
            term = T.bilinear_resize(cascade.levels[i], th, tw)
            if cji != 1.0:
                term = T.scale(term, cji)
            acc = term if acc is None else T.add(acc, term)
        if acc is None:
            acc = T.zeros(cascade.levels[j].shape)
        if addon is not None:
            acc = addon(acc)
        out.append(acc)
    return out


def apply_connection(cascade: FeatureCascade, spec: ConnectionSpec,
                     addon: Optional[AddonModule] = None,
                     detach_mode: Optional[str] = None) -> list[T.Tensor]:
    """Dispatch on the connection form; returns the per-branch inputs."""
    if spec.form == "economical":
        return economical(cascade, spec, addon=addon, detach_mode=detach_mode)
    if spec.form in ("variant_sm", "variant_sl"):
        return variant(cascade, spec, addon=addon, detach_mode=detach_mode)
    if spec.form == "complete":
        if detach_mode is not None:
            raise ValueError("gradient path splitting is defined for the "
                             "single-target forms only")
        return complete(cascade, spec.matrix, addon=addon)
    raise ValueError(f"apply_connection cannot handle form {spec.form!r}")
