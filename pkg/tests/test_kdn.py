import math

import numpy as np
import pytest

from rcdet import kdn
from rcdet import tensor as T
from rcdet.connections import FeatureCascade, align_cascade, bases_from_cascade, combine


def test_annotation_validates():
    with pytest.raises(ValueError):
        kdn.ObjectAnnotation(0, 0, 0.5, 4)
    a = kdn.ObjectAnnotation(3, 4, 5, 6, class_id=2)
    assert a.box == (3.0, 4.0, 5.0, 6.0)


# --- region projection -----------------------------------------------------

def test_project_region_exact_division():
    assert kdn.project_region((8, 8, 16, 16), 4, 24, 24) == (2, 2, 4, 4)


def test_project_region_subcell_keeps_one_cell():
    assert kdn.project_region((0, 0, 2, 2), 8, 12, 12) == (0, 0, 1, 1)


def test_project_region_mixed():
    # oracle: floor(5/4)=1, ceil(12/4)=3; floor(3/4)=0, ceil(12/4)=3
    assert kdn.project_region((5, 3, 7, 9), 4, 24, 24) == (1, 0, 2, 3)


def test_project_region_random_against_scalar_oracle(rng):
    for _ in range(200):
        s = int(rng.integers(1, 9))
        mh, mw = int(rng.integers(4, 30)), int(rng.integers(4, 30))
        x = float(rng.uniform(0, s * mw - 2))
        y = float(rng.uniform(0, s * mh - 2))
        w = float(rng.uniform(1, s * mw - x))
        h = float(rng.uniform(1, s * mh - y))
        cx, cy, cw, ch = kdn.project_region((x, y, w, h), s, mh, mw)
        ox = min(max(math.floor(x / s), 0), mw - 1)
        oy = min(max(math.floor(y / s), 0), mh - 1)
        ox2 = min(max(math.ceil((x + w) / s), ox + 1), mw)
        oy2 = min(max(math.ceil((y + h) / s), oy + 1), mh)
        assert (cx, cy, cw, ch) == (ox, oy, ox2 - ox, oy2 - oy)
        assert cw >= 1 and ch >= 1
        assert cx + cw <= mw and cy + ch <= mh


def test_project_region_clamps_to_map():
    # box hangs past the right/bottom edge of the map
    assert kdn.project_region((30, 30, 10, 10), 4, 8, 8) == (7, 7, 1, 1)


# --- salient pooling -------------------------------------------------------

def test_orsp_constant_map():
    sal = np.full((6, 6), 2.5)
    assert kdn.orsp(sal, (1, 1, 3, 3)) == 2.5


def test_orsp_single_cell():
    sal = np.arange(16.0).reshape(4, 4)
    assert kdn.orsp(sal, (2, 3, 1, 1)) == sal[3, 2]


def test_orsp_accepts_leading_axis(rng):
    sal = rng.normal(size=(1, 5, 5))
    assert kdn.orsp(sal, (0, 0, 5, 5)) == sal[0].max()


def test_orsp_random_vs_bruteforce(rng):
    for _ in range(100):
        sal = rng.normal(size=(8, 10))
        cx, cy = int(rng.integers(0, 9)), int(rng.integers(0, 7))
        cw, ch = int(rng.integers(1, 10 - cx + 1)), int(rng.integers(1, 8 - cy + 1))
        got = kdn.orsp(sal, (cx, cy, cw, ch))
        best = -np.inf
        for yy in range(cy, cy + ch):
            for xx in range(cx, cx + cw):
                best = max(best, sal[yy, xx])
        assert got == best


def test_orsp_empty_region_raises():
    with pytest.raises(ValueError):
        kdn.orsp(np.zeros((4, 4)), (1, 1, 0, 2))


# --- per-image factors -----------------------------------------------------

def _constant_cascade(values, size=8, ch=2):
    levels, strides = [], []
    s = size
    for i, v in enumerate(values):
        levels.append(T.tensor(np.full((1, ch, s, s), float(v))))
        strides.append(4 * 2 ** i)
        s //= 2
    return FeatureCascade(levels, strides)


def test_image_factors_symmetric_is_exactly_one():
    casc = _constant_cascade([0.7, 0.7, 0.7])
    lam = kdn.image_factors(casc, [kdn.ObjectAnnotation(4, 4, 8, 8)])
    assert np.array_equal(lam, [1.0, 1.0, 1.0])


def test_image_factors_dominant_level_saturates():
    casc = _constant_cascade([60.0, 0.0, 0.0])
    lam = kdn.image_factors(casc, [kdn.ObjectAnnotation(2, 2, 6, 6)])
    assert lam[0] > 2.999
    assert lam[1] < 1e-3 and lam[2] < 1e-3


def test_image_factors_known_values():
    # per-level expectations (1, 0, 0); oracle in plain scalar math:
    # shifted exps (1, e^-1, e^-1), lam_i = 3 e_i / sum
    casc = _constant_cascade([1.0, 0.0, 0.0])
    lam = kdn.image_factors(casc, [kdn.ObjectAnnotation(2, 2, 6, 6)])
    s = 1.0 + 2.0 * math.exp(-1.0)
    want = np.array([3.0 / s, 3.0 * math.exp(-1.0) / s, 3.0 * math.exp(-1.0) / s])
    assert np.allclose(lam, want, atol=1e-12)
    assert np.round(lam, 4).tolist() == [1.7284, 0.6358, 0.6358]


def test_image_factors_sum_is_level_count(rng):
    for _ in range(20):
        levels = [T.tensor(rng.normal(size=(1, 3, s, s))) for s in (16, 8, 4)]
        casc = FeatureCascade(levels, [4, 8, 16])
        objs = [kdn.ObjectAnnotation(float(rng.uniform(0, 50)), float(rng.uniform(0, 50)),
                                     float(rng.uniform(1, 12)), float(rng.uniform(1, 12)))
                for _ in range(int(rng.integers(1, 5)))]
        lam = kdn.image_factors(casc, objs)
        assert abs(lam.sum() - 3.0) <= 1e-12
        assert (lam >= 0).all()


def test_image_factors_order_invariant(rng):
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (16, 8, 4)]
    casc = FeatureCascade(levels, [4, 8, 16])
    objs = [kdn.ObjectAnnotation(2, 2, 6, 6), kdn.ObjectAnnotation(30, 20, 10, 14),
            kdn.ObjectAnnotation(10, 40, 4, 4)]
    a = kdn.image_factors(casc, objs)
    b = kdn.image_factors(casc, objs[::-1])
    assert np.array_equal(a, b)


def test_image_factors_requires_objects():
    casc = _constant_cascade([1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        kdn.image_factors(casc, [])


def test_scaled_softmax_limit():
    lam = kdn.scaled_softmax([1e4, 0.0, 0.0], 3.0)
    assert np.isclose(lam[0], 3.0)
    assert lam[1] == 0.0 and lam[2] == 0.0


# --- stacks / factor sets --------------------------------------------------

def test_stack_single_update():
    st = kdn.SalientStack()
    st.update([1.0, 1.0, 1.0])
    fs = kdn.finalize(st)
    assert np.array_equal(fs.lam_infer, [1.0, 1.0, 1.0])
    assert fs.relevance == [True, True, True]
    assert fs.count == 1


def test_stack_mean_of_two():
    st = kdn.SalientStack()
    st.update([2.0, 0.5, 0.5])
    st.update([0.0, 1.5, 1.5])
    fs = kdn.finalize(st)
    assert np.array_equal(fs.lam_infer, [1.0, 1.0, 1.0])


def test_stack_streaming_mean_matches_batch(rng):
    st = kdn.SalientStack()
    all_updates = []
    for _ in range(1000):
        lam = rng.uniform(0, 3, size=3)
        all_updates.append(lam)
        st.update(lam)
    want = np.mean(all_updates, axis=0)
    assert np.abs(st.mean() - want).max() <= 1e-12
    assert st.count == 1000


def test_finalize_empty_raises():
    with pytest.raises(ValueError):
        kdn.finalize(kdn.SalientStack())


def test_factor_set_relevance_thresholds():
    fs = kdn.FactorSet(lam_infer=[1.5, 1.0, 0.99], relevance=[True, True, False], count=3)
    assert fs.relevance == [True, True, False]
    with pytest.raises(ValueError):
        kdn.FactorSet(lam_infer=[1.5, 0.2, 0.2], relevance=[True, True, False], count=1)


# --- fusion ----------------------------------------------------------------

def test_fuse_train_zero_weights_select_one_level(rng):
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
    casc = FeatureCascade(levels, [4, 8, 16])
    out = kdn.fuse_train(casc, [1.0, 0.0, 0.0])
    assert np.array_equal(out.data, levels[0].data)


def test_fuse_train_constant_uniform():
    casc = _constant_cascade([2.0, 2.0, 2.0])
    out = kdn.fuse_train(casc, [1.0, 1.0, 1.0])
    assert np.allclose(out.data, 6.0, atol=1e-12)


def test_fuse_train_matches_manual_sum(rng):
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
    casc = FeatureCascade(levels, [4, 8, 16])
    lam = rng.uniform(0.2, 2.0, size=3)
    out = kdn.fuse_train(casc, lam)
    aligned = align_cascade(casc)
    want = sum(l * a.data for l, a in zip(lam, aligned))
    assert np.abs(out.data - want).max() <= 1e-12


def test_fuse_train_with_projections_is_differentiable(rng):
    levels = [T.tensor(rng.normal(size=(1, c, s, s))) for c, s in ((2, 8), (3, 4), (4, 2))]
    casc = FeatureCascade(levels, [4, 8, 16])
    ws = [T.tensor(rng.normal(size=(2, c, 1, 1)) * 0.5, requires_grad=True)
          for c in (2, 3, 4)]
    projs = [(lambda t, w=w: T.conv2d(t, w)) for w in ws]
    out = kdn.fuse_train(casc, [1.0, 1.0, 1.0], projections=projs)
    T.sum_all(out).backward()
    for w in ws:
        assert w.grad is not None and np.abs(w.grad).max() > 0


def test_fuse_infer_uniform_equals_train(rng):
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
    casc = FeatureCascade(levels, [4, 8, 16])
    fs = kdn.FactorSet(lam_infer=[1.0, 1.0, 1.0], relevance=[True] * 3, count=5)
    got = kdn.fuse_infer(casc, fs)
    want = kdn.fuse_train(casc, [1.0, 1.0, 1.0])
    assert np.array_equal(got.data, want.data)


def test_fuse_infer_masks_irrelevant(rng):
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
    casc = FeatureCascade(levels, [4, 8, 16])
    fs = kdn.FactorSet(lam_infer=[1.5, 0.9, 0.6], relevance=[True, False, False], count=2)
    out = kdn.fuse_infer(casc, fs)
    assert np.abs(out.data - 1.5 * levels[0].data).max() <= 1e-12


def test_fuse_infer_random_masked_sum(rng):
    for _ in range(10):
        levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
        casc = FeatureCascade(levels, [4, 8, 16])
        lam = rng.uniform(0.5, 1.5, size=3)
        if not (lam >= 1).any():
            lam[0] = 1.2
        fs = kdn.FactorSet(lam_infer=lam, relevance=[bool(v >= 1) for v in lam],
                           count=1)
        out = kdn.fuse_infer(casc, fs)
        aligned = align_cascade(casc)
        want = sum((l if l >= 1 else 0.0) * a.data for l, a in zip(lam, aligned))
        assert np.abs(out.data - want).max() <= 1e-12


def test_fuse_infer_no_relevant_levels_raises(rng):
    casc = _constant_cascade([1.0, 1.0, 1.0])
    fs = kdn.FactorSet(lam_infer=[0.9, 0.8, 0.7], relevance=[False] * 3, count=1)
    with pytest.raises(ValueError):
        kdn.fuse_infer(casc, fs)


def test_uniform_factors_bridge_to_basis_form(rng):
    # equal-salience fusion == strength-(4,2,1) basis combination
    levels = [T.tensor(rng.normal(size=(1, 2, s, s))) for s in (8, 4, 2)]
    casc = FeatureCascade(levels, [4, 8, 16])
    fused = kdn.fuse_train(casc, [1.0, 1.0, 1.0])
    aligned = align_cascade(casc)
    via_bases = combine(bases_from_cascade(aligned), [4.0, 2.0, 1.0])
    scale = np.abs(fused.data).max() + 1e-12
    assert np.abs(fused.data - via_bases.data).max() / scale <= 1e-10
