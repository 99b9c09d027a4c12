import numpy as np
import pytest

from rcdet import connections as C
from rcdet import linalg
from rcdet import tensor as T


# --- solver ---------------------------------------------------------------

def test_solve_matches_numpy(rng):
    for _ in range(50):
        n = int(rng.integers(2, 7))
        a = rng.normal(size=(n, n))
        b = rng.normal(size=(n,))
        if abs(np.linalg.det(a)) < 1e-6:
            continue
        x = linalg.solve(a, b)
        assert np.allclose(x, np.linalg.solve(a, b), rtol=1e-9, atol=1e-11)


def test_solve_needs_pivoting():
    # zero in the leading position forces a row swap
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    x = linalg.solve(a, np.array([2.0, 3.0]))
    assert np.allclose(x, [3.0, 2.0])


def test_solve_singular_raises():
    with pytest.raises(linalg.SingularMatrixError):
        linalg.solve(np.array([[1.0, 2.0], [2.0, 4.0]]), np.array([1.0, 1.0]))


def test_solve_does_not_mutate_inputs():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    a0, b0 = a.copy(), b.copy()
    linalg.solve(a, b)
    assert np.array_equal(a, a0) and np.array_equal(b, b0)


# --- factor <-> strength mapping ------------------------------------------

def test_uniform_factors_give_421_exactly():
    c = C.strengths_from_factors([1.0, 1.0, 1.0])
    assert np.array_equal(c, [4.0, 2.0, 1.0])


def test_zero_factors_give_zero_strengths():
    assert np.array_equal(C.strengths_from_factors([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])


def test_factors_211_give_521():
    c = C.strengths_from_factors([2.0, 1.0, 1.0])
    # oracle: independent dense solve of the same system
    want = np.linalg.solve(C.basis_matrix(3), [2.0, 1.0, 1.0])
    assert np.allclose(c, want, atol=1e-12)
    assert np.array_equal(c, [5.0, 2.0, 1.0])


def test_strengths_421_give_uniform_factors():
    assert np.array_equal(C.factors_from_strengths([4.0, 2.0, 1.0]), [1.0, 1.0, 1.0])


def test_round_trip_identity(rng):
    for _ in range(100):
        k = int(rng.integers(2, 5))
        lam = rng.normal(size=(k,)) * 3.0
        back = C.factors_from_strengths(C.strengths_from_factors(lam))
        assert np.abs(back - lam).max() <= 1e-12


def test_mapping_is_linear(rng):
    lam, mu = rng.normal(size=(3,)), rng.normal(size=(3,))
    a, b = 1.7, -0.4
    lhs = C.strengths_from_factors(a * lam + b * mu)
    rhs = a * C.strengths_from_factors(lam) + b * C.strengths_from_factors(mu)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_uniform_strengths_four_levels():
    assert np.array_equal(C.uniform_strengths(4), [8.0, 4.0, 2.0, 1.0])
    assert np.array_equal(C.uniform_strengths(3), [4.0, 2.0, 1.0])


def test_mapping_rejects_scalars():
    with pytest.raises(ValueError):
        C.strengths_from_factors([1.0])
    with pytest.raises(ValueError):
        C.factors_from_strengths(np.ones((2, 2)))


# --- cascade / bases -------------------------------------------------------

def _cascade(rng, ch=4, sizes=(8, 4, 2), batch=1):
    levels = [T.tensor(rng.normal(size=(batch, ch, s, s))) for s in sizes]
    return C.FeatureCascade(levels, [2 ** (i + 2) for i in range(len(sizes))])


def test_cascade_validates():
    a = T.zeros((1, 2, 8, 8))
    b = T.zeros((1, 2, 4, 4))
    with pytest.raises(ValueError):
        C.FeatureCascade([a, b], [4, 8])  # only 2 levels
    with pytest.raises(ValueError):
        C.FeatureCascade([a, b, a], [4, 8, 8])  # non-increasing stride


def test_align_identity_when_same_size(rng):
    levels = [T.tensor(rng.normal(size=(1, 3, 6, 6))) for _ in range(3)]
    casc = C.FeatureCascade(levels, [4, 8, 16])
    out = C.align_cascade(casc)
    for got, src in zip(out, levels):
        assert np.array_equal(got.data, src.data)


def test_align_constant_levels():
    levels = [T.tensor(np.full((1, 2, s, s), 3.0)) for s in (8, 4, 2)]
    casc = C.FeatureCascade(levels, [4, 8, 16])
    out = C.align_cascade(casc)
    for t in out:
        assert t.shape == (1, 2, 8, 8)
        assert np.allclose(t.data, 3.0, atol=1e-12)


def test_align_target_level_passthrough(rng):
    casc = _cascade(rng)
    out = C.align_cascade(casc, target_level=0)
    assert np.array_equal(out[0].data, casc.levels[0].data)


def test_align_rejects_channel_mismatch(rng):
    levels = [T.tensor(rng.normal(size=(1, c, 8, 8))) for c in (2, 3, 2)]
    casc = C.FeatureCascade(levels, [4, 8, 16])
    with pytest.raises(ValueError):
        C.align_cascade(casc)


def test_align_applies_projection(rng):
    levels = [T.tensor(rng.normal(size=(1, c, 4, 4))) for c in (2, 3, 2)]
    casc = C.FeatureCascade(levels, [4, 8, 16])
    w = T.tensor(rng.normal(size=(2, 3, 1, 1)))
    projs = [None, lambda t: T.conv2d(t, w), None]
    out = C.align_cascade(casc, projections=projs)
    assert all(t.shape == (1, 2, 4, 4) for t in out)


def test_bases_scalar_examples():
    mk = lambda v: T.tensor(np.full((1, 1, 2, 2), float(v)))
    b = C.bases_from_cascade([mk(1), mk(1), mk(1)])
    assert [float(t.data[0, 0, 0, 0]) for t in b] == [1.0, 0.0, -1.0]
    b = C.bases_from_cascade([mk(1), mk(2), mk(4)])
    assert [float(t.data[0, 0, 0, 0]) for t in b] == [1.0, 1.0, 1.0]


def test_bases_reconstruction_identity(rng):
    aligned = [T.tensor(rng.normal(size=(1, 3, 5, 5))) for _ in range(3)]
    b1, b2, b3 = [t.data for t in C.bases_from_cascade(aligned)]
    f1, f2, f3 = [t.data for t in aligned]
    assert np.abs(b1 - f1).max() <= 1e-12
    assert np.abs((b1 + b2) - f2).max() <= 1e-12
    assert np.abs((2 * b1 + b2 + b3) - f3).max() <= 1e-12


def test_bases_four_levels(rng):
    aligned = [T.tensor(rng.normal(size=(1, 2, 4, 4))) for _ in range(4)]
    bs = C.bases_from_cascade(aligned)
    f = [t.data for t in aligned]
    assert np.abs(bs[3].data - (f[3] - f[2] - f[1] - f[0])).max() <= 1e-12


def test_bases_reject_mismatched_shapes(rng):
    with pytest.raises(ValueError):
        C.bases_from_cascade([T.zeros((1, 2, 4, 4)), T.zeros((1, 2, 2, 2)),
                              T.zeros((1, 2, 4, 4))])


# --- combine ---------------------------------------------------------------

def test_combine_constant_421_and_521():
    mk = lambda: T.tensor(np.full((1, 1, 3, 3), 2.0))
    bases = C.bases_from_cascade([mk(), mk(), mk()])
    out = C.combine(bases, [4.0, 2.0, 1.0])
    assert np.allclose(out.data, 6.0, atol=1e-12)  # 3k with k=2
    out = C.combine(bases, [5.0, 2.0, 1.0])
    assert np.allclose(out.data, 8.0, atol=1e-12)  # 4k, raw form (2,1,1)


def test_combine_421_equals_plain_sum(rng):
    aligned = [T.tensor(rng.normal(size=(2, 3, 6, 6))) for _ in range(3)]
    out = C.combine(C.bases_from_cascade(aligned), [4.0, 2.0, 1.0])
    want = aligned[0].data + aligned[1].data + aligned[2].data
    assert np.abs(out.data - want).max() <= 1e-12


def test_combine_zero_strengths_gives_zeros(rng):
    aligned = [T.tensor(rng.normal(size=(1, 2, 4, 4))) for _ in range(3)]
    out = C.combine(C.bases_from_cascade(aligned), [0.0, 0.0, 0.0])
    assert np.array_equal(out.data, np.zeros((1, 2, 4, 4)))


def test_raw_basis_duality(rng):
    # combining bases with mapped strengths == weighting raw levels by factors
    for _ in range(20):
        lam = rng.normal(size=(3,)) * 2.0
        aligned = [T.tensor(rng.normal(size=(1, 2, 5, 5))) for _ in range(3)]
        c = C.strengths_from_factors(lam)
        got = C.combine(C.bases_from_cascade(aligned), c).data
        want = sum(l * a.data for l, a in zip(lam, aligned))
        scale = np.abs(want).max() + 1e-12
        assert np.abs(got - want).max() / scale <= 1e-10


def test_combine_is_differentiable(rng):
    aligned = [T.tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
               for _ in range(3)]
    out = C.combine(C.bases_from_cascade(aligned), [4.0, 2.0, 1.0])
    T.sum_all(out).backward()
    # d(sum F1+F2+F3)/dF_i = 1 everywhere
    for t in aligned:
        assert np.allclose(t.grad, 1.0, atol=1e-12)
