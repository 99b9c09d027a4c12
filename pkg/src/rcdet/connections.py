"""Feature-basis algebra for multi-scale connections.

A cascade of k pyramid levels (finest first) is rewritten into k
independent bases:

    B1 = F1
    B2 = F2 - F1
    B3 = F3 - F2 - F1
    (B4 = F4 - F3 - F2 - F1 for k = 4)

Weighting the bases by per-basis strengths c is equivalent to weighting
the raw levels by per-level factors lam; the two coordinate systems are
related by the triangular system M c = lam with M[i][j] = 1 on the
diagonal, -1 above it.  Uniform factors (1, 1, 1) land on strengths
(4, 2, 1); with four levels the same construction gives (8, 4, 2, 1).

Factors and strengths are plain 1-D float arrays throughout.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import linalg
from . import tensor as T


class FeatureCascade:
    """Ordered pyramid levels, finest first, with their strides."""

    def __init__(self, levels: Sequence[T.Tensor], strides: Sequence[int]):
        levels = list(levels)
        strides = [int(s) for s in strides]
        if len(levels) != len(strides):
            raise ValueError(f"{len(levels)} levels but {len(strides)} strides")
        if len(levels) not in (3, 4):
            raise ValueError(f"cascade must have 3 or 4 levels, got {len(levels)}")
        for a, b in zip(strides, strides[1:]):
            if b <= a:
                raise ValueError(f"strides must strictly increase, got {strides}")
        self.levels = levels
        self.strides = strides

    @property
    def degrees_of_freedom(self) -> int:
        return len(self.levels)

    def __len__(self) -> int:
        return len(self.levels)


def basis_matrix(k: int) -> np.ndarray:
    """M with lam = M c: expresses basis strengths in raw-level factors."""
    m = np.zeros((k, k))
    for i in range(k):
        m[i, i] = 1.0
        m[i, i + 1:] = -1.0
    return m


def strengths_from_factors(factors) -> np.ndarray:
    """Per-level factors -> per-basis strengths (solves M c = lam)."""
    lam = np.asarray(factors, dtype=np.float64)
    if lam.ndim != 1 or lam.size < 2:
        raise ValueError(f"factors must be a vector of length >= 2, got shape {lam.shape}")
    return linalg.solve(basis_matrix(lam.size), lam)


def factors_from_strengths(strengths) -> np.ndarray:
    """Per-basis strengths -> per-level factors (direct product M c)."""
    c = np.asarray(strengths, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise ValueError(f"strengths must be a vector of length >= 2, got shape {c.shape}")
    return basis_matrix(c.size) @ c


def uniform_strengths(k: int) -> np.ndarray:
    """Strengths produced by all-ones factors: (4,2,1) for k=3, (8,4,2,1) for k=4."""
    return strengths_from_factors(np.ones(k))


def align_cascade(cascade: FeatureCascade, target_level: int = 0,
                  projections: Optional[Sequence[Optional[Callable[[T.Tensor], T.Tensor]]]] = None,
                  ) -> list[T.Tensor]:
    """Bring every level onto the target level's spatial grid.

    Each level is (optionally) channel-projected, then bilinearly resized.
    Without projections all levels must already share a channel count;
    pyramid outputs after lateral 1x1 convs do, so the multi-branch path
    stays free of extra learnable layers.
    """
    k = len(cascade)
    if not 0 <= target_level < k:
        raise ValueError(f"target_level {target_level} out of range for {k} levels")
    if projections is not None and len(projections) != k:
        raise ValueError(f"{len(projections)} projections for {k} levels")
    th, tw = cascade.levels[target_level].shape[-2:]
    out = []
    for i, level in enumerate(cascade.levels):
        if projections is not None and projections[i] is not None:
            level = projections[i](level)
        out.append(T.bilinear_resize(level, th, tw))
    channels = {t.shape[-3] for t in out}
    if len(channels) != 1:
        raise ValueError(f"aligned levels disagree on channels: {sorted(channels)}; "
                         "a projection is required")
    return out


def bases_from_cascade(aligned: Sequence[T.Tensor]) -> list[T.Tensor]:
    """B1 = F1, B_j = F_j - sum of all finer levels."""
    aligned = list(aligned)
    shapes = {t.shape for t in aligned}
    if len(shapes) != 1:
        raise ValueError(f"aligned levels must share a shape, got {sorted(shapes)}")
    bases = [aligned[0]]
    for j in range(1, len(aligned)):
        b = aligned[j]
        for i in range(j):
            b = T.sub(b, aligned[i])
        bases.append(b)
    return bases


def combine(bases: Sequence[T.Tensor], strengths) -> T.Tensor:
    """Strength-weighted sum of bases.  Zero strengths contribute nothing
    (their term is skipped, not multiplied out)."""
    c = np.asarray(strengths, dtype=np.float64)
    if c.size != len(bases):
        raise ValueError(f"{c.size} strengths for {len(bases)} bases")
    out = None
    for ci, b in zip(c, bases):
        if ci == 0.0:
            continue
        term = b if ci == 1.0 else T.scale(b, ci)
        out = term if out is None else T.add(out, term)
    if out is None:
        first = bases[0]
        return T.zeros(first.shape)
    return out
