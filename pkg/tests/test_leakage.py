import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskedkrum.codebook import build_codebook, equivalent_sigma
from maskedkrum.core import GradientVector, ValidationError
from maskedkrum.leakage import SIGMA_MIN, calibrate_sigma, estimate_variances, mi_bound

variances = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e4))
positive_variances = arrays(np.float64, st.integers(1, 40), elements=st.floats(1e-4, 1e4))


class TestBound:
    def test_zero_variance(self):
        assert mi_bound(np.zeros(7), 0.3).per_client_bound == 0

    def test_equal_to_sigma(self):
        rep = mi_bound(np.full(10, 4.0), 2.0)
        assert rep.per_client_bound == pytest.approx(5 * math.log(2), abs=1e-12)
        assert rep.bits == pytest.approx(5.0, abs=1e-12)

    def test_estimated_variances_close_to_truth(self):
        rng = np.random.default_rng(17)
        true_var = np.linspace(0.5, 3.0, 12)
        samples = rng.normal(0.0, np.sqrt(true_var), size=(10_000, 12))
        est = estimate_variances(list(samples))
        closed = sum(0.5 * math.log(1 + v) for v in true_var)
        assert mi_bound(est, 1.0).per_client_bound == pytest.approx(closed, rel=0.02)

    def test_errors(self):
        with pytest.raises(ValidationError):
            mi_bound([1.0, -0.1], 1.0)
        with pytest.raises(ValidationError):
            mi_bound([1.0], 0.0)

    def test_report_fields(self):
        rep = mi_bound([1.0, 2.0], 1.0)
        d = rep.as_dict()
        assert d["variance_source"] == "declared"
        assert d["caveat"].startswith("gaussian-approximation")
        assert len(d["per_coordinate_terms"]) == 2

    @given(variances, st.floats(1e-3, 1e3))
    def test_sum_of_terms(self, v, sigma):
        rep = mi_bound(v, sigma)
        assert rep.per_client_bound == pytest.approx(sum(rep.per_coordinate_terms), abs=1e-12, rel=1e-12)
        assert all(t >= 0 for t in rep.per_coordinate_terms)

    @given(variances, st.integers(0, 40), st.floats(1e-2, 1e2))
    def test_additive_over_partition(self, v, cut, sigma):
        cut = min(cut, v.size)
        whole = mi_bound(v, sigma).per_coordinate_terms
        left = mi_bound(v[:cut], sigma).per_coordinate_terms if cut else ()
        right = mi_bound(v[cut:], sigma).per_coordinate_terms if cut < v.size else ()
        assert whole == left + right

    @given(positive_variances, st.floats(1e-2, 1e2))
    def test_strictly_decreasing_in_sigma(self, v, sigma):
        assert mi_bound(v, sigma * 1.01).per_client_bound < mi_bound(v, sigma).per_client_bound

    def test_codebook_sigma_feeds_report(self):
        cb = build_codebook(4, 64, 8.0, 1)
        rep = mi_bound(np.full(64, 0.01), equivalent_sigma(cb))
        assert rep.sigma == 0.25


class TestEstimate:
    def test_two_samples(self):
        assert estimate_variances([[0.0], [2.0]]).tolist() == [2.0]

    def test_identical(self):
        g = GradientVector(1, [1.5, -3.0])
        assert estimate_variances([g] * 6).tolist() == [0.0, 0.0]

    def test_known_distribution(self):
        rng = np.random.default_rng(5)
        truth = np.array([0.1, 1.0, 10.0, 100.0])
        draws = rng.normal(3.0, np.sqrt(truth), size=(10_000, 4))
        np.testing.assert_allclose(estimate_variances(draws), truth, rtol=0.05)

    def test_needs_two(self):
        with pytest.raises(ValidationError):
            estimate_variances([[1.0, 2.0]])


class TestCalibrate:
    def test_closed_form_one(self):
        assert calibrate_sigma([1.0], 0.5 * math.log(2)).sigma == pytest.approx(1.0, rel=1e-12)

    def test_closed_form_two(self):
        assert calibrate_sigma([1.0], 0.5 * math.log(1.25)).sigma == pytest.approx(2.0, rel=1e-12)

    def test_all_zero_flagged(self):
        cal = calibrate_sigma(np.zeros(5), 0.1)
        assert cal.unconstrained and cal.sigma == SIGMA_MIN

    def test_bad_budget(self):
        with pytest.raises(ValidationError):
            calibrate_sigma([1.0], 0.0)

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1e3)).filter(lambda v: v.max() > 1e-3),
           st.floats(1e-3, 50))
    def test_bracketing(self, v, eps):
        sigma = calibrate_sigma(v, eps).sigma
        assert mi_bound(v, sigma).per_client_bound <= eps
        assert mi_bound(v, sigma * (1 - 1e-6)).per_client_bound > eps

    @given(positive_variances, st.floats(1e-3, 50))
    def test_round_trip_tight(self, v, eps):
        got = mi_bound(v, calibrate_sigma(v, eps).sigma).per_client_bound
        assert got == pytest.approx(eps, rel=1e-6)
