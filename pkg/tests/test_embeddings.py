"""Covariance activation and Gaussian sequence lookup."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stosa import autograd as ag
from stosa.embeddings import (EmbeddingLookupError, GaussianBatch, StochasticTables,
                              activate_covariance, lookup_sequence)


class TestActivateCovariance:
    def test_values(self):
        np.testing.assert_allclose(activate_covariance(np.array([0.0, 2.5])), [1.0, 3.5])
        assert activate_covariance(np.array(-3.0)) == pytest.approx(math.exp(-3), rel=1e-15)

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            activate_covariance(np.array([0.0, np.nan]))
        with pytest.raises(FloatingPointError):
            activate_covariance(ag.Tensor(np.array([np.inf])))

    @given(arrays(np.float64, st.integers(1, 50),
                  elements=st.floats(-700, 1e6, allow_nan=False)))
    def test_positive_and_monotone(self, raw):
        out = activate_covariance(raw)
        assert np.all(out > 0)
        order = np.argsort(raw, kind="stable")
        assert np.all(np.diff(out[order]) >= 0)

    def test_tensor_matches_numpy(self, rng):
        raw = rng.standard_normal(30) * 3
        np.testing.assert_allclose(activate_covariance(ag.Tensor(raw)).data,
                                   activate_covariance(raw), rtol=1e-12)

    def test_gradient(self, rng):
        raw = rng.standard_normal(40) * 2
        raw = raw[np.abs(raw) > 1e-3]  # keep away from the kink
        t = ag.parameter(raw.copy())
        activate_covariance(t).sum().backward()
        h = 1e-6
        numeric = (activate_covariance(raw + h) - activate_covariance(raw - h)) / (2 * h)
        np.testing.assert_allclose(t.grad, numeric, rtol=1e-4)


class TestLookup:
    def setup_method(self):
        self.tables = StochasticTables.initialize(6, 4, 3, np.random.default_rng(0))

    def lookup(self, inputs, **kw):
        t = self.tables
        return lookup_sequence(t.item_mean, t.item_cov_raw, t.pos_mean, t.pos_cov_raw,
                               np.asarray(inputs), **kw)

    def test_all_padding(self):
        out = self.lookup([[0, 0, 0, 0]])
        assert not out.mask.any()

    def test_zero_tables(self):
        z = StochasticTables(np.zeros((7, 3)), np.zeros((7, 3)), np.zeros((4, 3)),
                             np.zeros((4, 3)))
        out = lookup_sequence(z.item_mean, z.item_cov_raw, z.pos_mean, z.pos_cov_raw,
                              np.array([[0, 1, 2, 3]]))
        np.testing.assert_array_equal(np.asarray(out.mean.data), 0)
        np.testing.assert_array_equal(np.asarray(out.cov.data), 1)

    def test_single_item_last_position(self):
        out = self.lookup([[0, 0, 0, 5]])
        t = self.tables
        np.testing.assert_array_equal(out.mask, [[False, False, False, True]])
        np.testing.assert_allclose(np.asarray(out.mean.data)[0, 3], t.item_mean[5] + t.pos_mean[3])
        np.testing.assert_allclose(np.asarray(out.cov.data)[0, 3],
                                   activate_covariance(t.item_cov_raw[5] + t.pos_cov_raw[3]))

    def test_independent_of_neighbours(self):
        a = np.asarray(self.lookup([[1, 2, 3, 4]]).mean.data)
        b = np.asarray(self.lookup([[6, 5, 3, 1], [2, 2, 2, 4]]).mean.data)
        np.testing.assert_array_equal(a[0, 2], b[0, 2])
        np.testing.assert_array_equal(a[0, 3], b[1, 3])

    def test_out_of_range(self):
        with pytest.raises(EmbeddingLookupError):
            self.lookup([[0, 0, 0, 7]])
        with pytest.raises(EmbeddingLookupError):
            self.lookup([[0, 0, -1, 1]])

    def test_covariance_positive(self):
        out = self.lookup([[1, 2, 3, 4], [0, 0, 5, 6]])
        assert np.all(np.asarray(out.cov.data) > 0)

    def test_initialisation_scale(self):
        t = StochasticTables.initialize(2000, 50, 32, np.random.default_rng(3))
        assert t.d_half == 32
        assert np.std(t.item_mean) == pytest.approx(0.02, rel=0.02)
        np.testing.assert_allclose(t.item_covariance().mean(), 1.0, atol=0.01)


class TestGaussianBatch:
    def test_shape_checks(self):
        with pytest.raises(ValueError):
            GaussianBatch(np.zeros((1, 2, 3)), np.ones((1, 2, 4)), np.ones((1, 2), bool))
        with pytest.raises(ValueError):
            GaussianBatch(np.zeros((1, 2, 3)), np.ones((1, 2, 3)), np.ones((1, 3), bool))
