"""Band layout geometry and the banded vs dense span scorer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longner import tensor as T
from longner.instrument import METER
from longner.oracles import band_extract, dense_biaffine, recover
from longner.spans import SpanScorer, band_geometry, band_validity
from longner.tensor import Tensor


def make_scorer(d=8, c=6, seed=0):
    return SpanScorer(d, c, np.random.default_rng(seed))


def rand_pair(L, d, seed):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((L, d))), Tensor(rng.standard_normal((L, d)))


# ---------------------------------------------------------------------------
# geometry


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20))
def test_validity_matches_enumeration(L, m):
    valid = band_validity(L, m)
    for i in range(L):
        for k in range(2 * m + 1):
            assert valid[i, k] == (0 <= i + k - m < L)


def test_validity_worked_example_L3_m1():
    valid = band_validity(3, 1)
    expected = {(0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1)}
    assert {(i, k) for i, k in zip(*np.nonzero(valid))} == expected


def test_upper_lower_slot_classes():
    geo = band_geometry(4, 2)
    assert list(geo.upper_h) == [False, False, True, True, True]
    assert list(geo.upper_v) == [True, True, True, False, False]


# ---------------------------------------------------------------------------
# start/end heads


def test_heads_zero_input_zero_bias_gives_zero(rng):
    sc = make_scorer()
    H = Tensor(np.zeros((5, 8)))
    hs, he = sc.start_end_heads(H)
    np.testing.assert_array_equal(hs.data, np.zeros((5, 8)))
    np.testing.assert_array_equal(he.data, np.zeros((5, 8)))


def test_heads_preserve_shape():
    sc = make_scorer()
    for L in (1, 4, 17):
        hs, he = sc.start_end_heads(Tensor(np.random.default_rng(L).standard_normal((L, 8))))
        assert hs.shape == (L, 8) and he.shape == (L, 8)


def test_heads_gradients_match_finite_differences(rng):
    from longner.optim import finite_diff_check
    sc = make_scorer(d=4, c=3)
    mix = Tensor(rng.standard_normal((3, 4)))

    def f_through_heads(x):
        hs, he = sc.start_end_heads(x)
        return T.tsum(T.mul(T.add(hs, he), mix))

    err = finite_diff_check(f_through_heads, Tensor(rng.standard_normal((3, 4))), eps=1e-4)
    assert err < 1e-4
    # parameters: the checker perturbs the shared tensor in place, so a
    # closure over a fixed input exercises each head weight
    x0 = Tensor(rng.standard_normal((3, 4)))
    for pname, p in sc.params().items():
        if "start_w" in pname or "end_w" in pname:
            err = finite_diff_check(lambda _t: f_through_heads(x0), p, eps=1e-4)
            assert err < 1e-3, pname


# ---------------------------------------------------------------------------
# biaffine band


def test_biaffine_constant_case():
    sc = make_scorer(d=5, c=4, seed=1)
    sc.w1.data = np.zeros_like(sc.w1.data)
    sc.w2.data = np.zeros_like(sc.w2.data)
    b0 = np.array([1.0, -2.0, 0.5, 3.0])
    sc.b.data = b0.copy()
    hs, he = rand_pair(6, 5, 2)
    band = sc.biaffine_band(hs, he, m=2)
    for i in range(6):
        for k in range(5):
            if band.validity[i, k]:
                np.testing.assert_array_equal(band.data.data[i, k], b0)
            else:
                np.testing.assert_array_equal(band.data.data[i, k], np.zeros(4))


def test_biaffine_band_matches_dense_cells(rng):
    sc = make_scorer(d=6, c=5, seed=3)
    hs, he = rand_pair(6, 6, 4)
    band = sc.biaffine_band(hs, he, m=2)
    dense = dense_biaffine(hs.data, he.data, sc)
    geo = band_geometry(6, 2)
    for i in range(6):
        for k in range(5):
            if geo.valid[i, k]:
                j = i + k - 2
                np.testing.assert_allclose(band.data.data[i, k], dense[i, j], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.integers(1, 16), st.integers(0, 10_000))
def test_biaffine_band_dense_agreement_randomized(L, m, seed):
    sc = make_scorer(d=4, c=3, seed=seed)
    hs, he = rand_pair(L, 4, seed + 1)
    band = sc.biaffine_band(hs, he, m=m)
    dense = dense_biaffine(hs.data, he.data, sc)
    square = recover(band)
    geo = band_geometry(L, m)
    rows = np.repeat(np.arange(L), geo.width).reshape(L, geo.width)
    mask = np.zeros((L, L), dtype=bool)
    mask[rows[geo.valid], geo.j_index[geo.valid]] = True
    assert np.abs(square[mask] - dense[mask]).max() < 1e-10
    assert np.all(square[~mask] == 0.0)


def test_biaffine_dense_zero_inputs_give_bias():
    sc = make_scorer(d=5, c=4, seed=7)
    z = Tensor(np.zeros((4, 5)))
    dense = dense_biaffine(z.data, z.data, sc)
    np.testing.assert_allclose(dense, np.broadcast_to(sc.b.data, (4, 4, 4)), atol=1e-15)


def test_biaffine_dense_symmetry_under_symmetric_bilinear(rng):
    # with hs == he, W2 = 0, and W1 symmetric in its two contraction axes,
    # S[i, j] must equal S[j, i]
    sc = make_scorer(d=5, c=3, seed=9)
    w1 = rng.standard_normal((5, 3, 5))
    sc.w1.data = 0.5 * (w1 + w1.transpose(2, 1, 0))
    sc.w2.data = np.zeros_like(sc.w2.data)
    h = rng.standard_normal((6, 5))
    dense = dense_biaffine(h, h, sc)
    np.testing.assert_allclose(dense, dense.transpose(1, 0, 2), atol=1e-12)


def test_biaffine_dense_cap():
    sc = make_scorer(d=4, c=3)
    big = Tensor(np.zeros((70, 4)))
    with pytest.raises(ValueError, match="cap"):
        sc.biaffine_dense(big, big, limit=64)


def test_biaffine_band_allocations_stay_linear():
    # the banded path must not materialize any Theta(L^2) intermediate
    sc = make_scorer(d=6, c=4, seed=5)
    peaks = {}
    for L in (64, 128):
        hs, he = rand_pair(L, 6, L)
        with T.no_grad():
            with METER.stage(f"band-{L}") as st_:
                sc.biaffine_band(hs, he, m=4)
        peaks[L] = st_.max_single_alloc
    ratio = peaks[128] / peaks[64]
    assert ratio <= 2.5, f"largest single allocation grew superlinearly: {peaks}"


def test_band_tensor_check_passes():
    sc = make_scorer(d=4, c=3, seed=2)
    hs, he = rand_pair(7, 4, 3)
    band = sc.biaffine_band(hs, he, m=3)
    band.check()
