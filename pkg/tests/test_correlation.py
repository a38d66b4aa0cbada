import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semmatch import tensorcore as tc
from semmatch.correlation import (FeatureMap, correlate, foreground_mask, from_regressor_layout,
                                  reshape_for_regressor)
from semmatch.tensorcore import Tensor

from gradcheck import check_tensors


def fmap(arr, dtype=np.float64, **kw):
    return FeatureMap.from_array(np.asarray(arr, dtype=np.float64), dtype=dtype, **kw)


def random_map(rng, h, w, d=3):
    return fmap(rng.normal(size=(h, w, d)))


class TestCorrelate:
    def test_self_similarity_of_unit_vector(self):
        f = fmap([[[0.6, 0.8]]])
        S = correlate(f, f)
        assert S.as_4d().shape == (1, 1, 1, 1)
        assert S.as_4d()[0, 0, 0, 0] == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        assert correlate(fmap([[[1, 0]]]), fmap([[[0, 1]]])).as_4d().item() == 0.0

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))
        S = correlate(fmap(a), fmap(b)).as_4d()
        for i in range(2):
            for j in range(2):
                for s in range(2):
                    for t in range(2):
                        u = a[i, j] / np.sqrt(sum(v * v for v in a[i, j]))
                        v = b[s, t] / np.sqrt(sum(v * v for v in b[s, t]))
                        dot = sum(u[k] * v[k] for k in range(3))
                        assert S[i, j, s, t] == pytest.approx(max(0.0, dot), abs=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(tc.ShapeError, match="channel"):
            correlate(fmap(np.ones((2, 2, 3))), fmap(np.ones((2, 2, 4))))

    def test_zero_cells_correlate_to_zero(self):
        a = np.ones((2, 2, 3))
        a[0, 1] = 0
        f = fmap(a)
        S = correlate(f, f).as_4d()
        assert np.all(S[0, 1] == 0) and np.all(S[:, :, 0, 1] == 0)
        assert foreground_mask(correlate(f, f)).data[1] == 0

    def test_volume_normalization_switch(self):
        rng = np.random.default_rng(1)
        fa, fb = random_map(rng, 2, 2), random_map(rng, 2, 3)
        S = correlate(fa, fb, "volume").values.data
        raw = fa.table().data @ fb.table().data.T
        np.testing.assert_allclose(S, np.maximum(raw / np.linalg.norm(raw, axis=1, keepdims=True), 0), atol=1e-12)
        with pytest.raises(ValueError):
            correlate(fa, fb, "bogus")

    def test_gradient_to_both_maps(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True, dtype=np.float64)
        w = rng.normal(size=(4, 6))

        def build():
            S = correlate(FeatureMap(tc.l2_normalize(a, axis=-1)), FeatureMap(tc.l2_normalize(b, axis=-1)))
            return tc.sum_reduce(tc.mul(S.values, w))

        assert check_tensors(build, [a, b]) < 1e-4


class TestReshape:
    def test_row_major_flatten(self):
        S = from_regressor_layout(Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]])), (2, 2))
        np.testing.assert_array_equal(S.as_4d(), [[[[1, 2], [3, 4]]]])
        np.testing.assert_array_equal(reshape_for_regressor(S).data, [[[1, 2, 3, 4]]])

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        S = correlate(random_map(rng, 3, 2), random_map(rng, 2, 4))
        back = from_regressor_layout(reshape_for_regressor(S), S.target_shape)
        assert back.values.data.tobytes() == S.values.data.tobytes()

    def test_index_oracle(self):
        rng = np.random.default_rng(4)
        S = correlate(random_map(rng, 3, 3), random_map(rng, 2, 2))
        R = reshape_for_regressor(S).data
        four = S.as_4d()
        for i in range(3):
            for j in range(3):
                for k in range(4):
                    assert R[i, j, k] == four[i, j, k // 2, k % 2]


class TestMask:
    def test_identical_maps_give_ones(self):
        f = random_map(np.random.default_rng(5), 3, 4)
        np.testing.assert_allclose(foreground_mask(correlate(f, f)).data, 1.0, atol=1e-12)

    def test_orthogonal_cell_is_zero(self):
        a = fmap([[[1, 0, 0], [0, 1, 0]]])
        b = fmap([[[0, 1, 0], [0, 1, 1]]])
        np.testing.assert_allclose(foreground_mask(correlate(a, b)).data, [0, 1])

    def test_brute_force_max(self):
        rng = np.random.default_rng(6)
        S = correlate(random_map(rng, 3, 3), random_map(rng, 3, 3))
        four = S.as_4d()
        m = foreground_mask(S).data
        for i in range(3):
            for j in range(3):
                assert m[i * 3 + j] == max(four[i, j, s, t] for s in range(3) for t in range(3))

    def test_detach_blocks_gradient(self):
        a = Tensor(np.random.default_rng(7).normal(size=(2, 2, 3)), requires_grad=True, dtype=np.float64)
        f = FeatureMap(a)
        assert not foreground_mask(correlate(f, f), detach=True).requires_grad
        assert foreground_mask(correlate(f, f)).requires_grad


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    fa, fb = random_map(rng, 2, 3), random_map(rng, 3, 2)
    np.testing.assert_allclose(correlate(fa, fb).values.data, correlate(fb, fa).values.data.T, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_range(seed):
    rng = np.random.default_rng(seed)
    S = correlate(random_map(rng, 3, 3, 4), random_map(rng, 2, 4, 4))
    m = foreground_mask(S).data
    assert S.values.data.min() >= 0 and S.values.data.max() <= 1 + 1e-6
    assert m.min() >= 0 and m.max() <= 1 + 1e-6


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(0, 5), st.integers(0, 5))
def test_duplicate_cell_never_lowers_mask(seed, src, dst):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 2, 4))
    before = foreground_mask(correlate(fmap(a), fmap(b))).data[src]
    b2 = b.copy()
    b2[dst // 2, dst % 2] = a[src // 3, src % 3]
    after = foreground_mask(correlate(fmap(a), fmap(b2))).data[src]
    assert after >= before - 1e-12
    assert after == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_feature_cells_unit_or_zero(seed):
    rng = np.random.default_rng(seed)
    arr = rng.normal(size=(3, 3, 5))
    arr[rng.random((3, 3)) < 0.3] = 0
    n = np.linalg.norm(fmap(arr).values.data, axis=-1)
    assert np.all((np.abs(n - 1) < 1e-5) | (n == 0))
