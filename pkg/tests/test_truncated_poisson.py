import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from udn import autodiff as ad
from udn.truncated_poisson import (
    LN2,
    DepthPrior,
    DomainError,
    TruncatedPoissonDist,
    bound_violations,
    log_pmf_node,
    poisson_quantile,
    verify_theorem1,
)


def quantile_by_summation(lam, delta):
    """Plain-probability CDF accumulation; fine for moderate lam."""
    k, p = 0, math.exp(-lam)
    cdf = p
    while cdf < delta:
        k += 1
        p *= lam / k
        cdf += p
    return k


class TestQuantile:
    def test_small_lambda_example(self):
        # 0.6065 + 0.3033 = 0.9098 < 0.95 <= 0.9098 + 0.0758
        assert quantile_by_summation(0.5, 0.95) == 2
        assert poisson_quantile(0.5, 0.95) == 2

    def test_vanishing_lambda(self):
        assert poisson_quantile(1e-8, 0.95) == 0

    def test_median_lower_bound(self):
        med = poisson_quantile(10.0, 0.5)
        assert med == 10
        assert med >= 10 - LN2

    @pytest.mark.parametrize("lam", [0.1, 0.5, 1.0, 3.7, 10.0, 42.0, 70.0, 250.0, 700.0])
    @pytest.mark.parametrize("delta", [0.5, 0.8, 0.95, 0.99])
    def test_matches_scipy_ppf(self, lam, delta):
        assert poisson_quantile(lam, delta) == int(stats.poisson.ppf(delta, lam))

    @pytest.mark.parametrize("lam", [0.3, 2.0, 9.5, 33.3])
    def test_matches_summation_oracle(self, lam):
        assert poisson_quantile(lam, 0.95) == quantile_by_summation(lam, 0.95)

    def test_invalid_lambda(self):
        with pytest.raises(DomainError):
            poisson_quantile(0.0, 0.95)


class TestSupport:
    def test_bounds_at_five(self):
        m = TruncatedPoissonDist(5.0, 0.95, 0).support_max()
        assert 5 - LN2 <= m <= 1.3 * 5 + 5

    def test_degenerate_shifted(self):
        d = TruncatedPoissonDist(1e-8, 0.95, 1)
        assert d.support_max() == 1
        np.testing.assert_array_equal(d.support(), [1])

    def test_at_seventy(self):
        m = TruncatedPoissonDist(70.0, 0.95, 0).support_max()
        assert m == quantile_by_summation(70.0, 0.95)
        assert 70 - LN2 <= m <= 1.3 * 70 + 5

    def test_monotone_in_lambda(self):
        ms = [TruncatedPoissonDist(lam).support_max() for lam in np.linspace(0.01, 80, 2000)]
        assert np.all(np.diff(ms) >= 0)

    @pytest.mark.parametrize("delta", [0.4, 1.0])
    def test_delta_domain(self, delta):
        with pytest.raises(DomainError):
            TruncatedPoissonDist(1.0, delta)


class TestPmf:
    @settings(max_examples=300, deadline=None)
    @given(lam=st.floats(1e-6, 200.0), delta=st.floats(0.5, 0.999))
    def test_normalised(self, lam, delta):
        assert abs(TruncatedPoissonDist(lam, delta).pmf().sum() - 1.0) <= 1e-12

    def test_matches_renormalised_scipy(self):
        d = TruncatedPoissonDist(6.3, 0.95)
        raw = stats.poisson.pmf(d.support(), 6.3)
        np.testing.assert_allclose(d.pmf(), raw / raw.sum(), rtol=1e-12)

    @pytest.mark.parametrize("n", range(1, 201))
    def test_mode_at_n(self, n):
        assert n in TruncatedPoissonDist(n + 0.5, 0.95, 0).mode()

    def test_shift_invariance(self):
        a = TruncatedPoissonDist(3.3, 0.95, 0)
        b = TruncatedPoissonDist(3.3, 0.95, 1)
        np.testing.assert_array_equal(a.pmf(), b.pmf())
        np.testing.assert_array_equal(b.support(), a.support() + 1)
        for ell in b.support():
            assert b.log_pmf(ell) == a.log_pmf(ell - 1)

    def test_log_pmf_outside_support(self):
        d = TruncatedPoissonDist(2.0, 0.95, 1)
        with pytest.raises(DomainError):
            d.log_pmf(0)
        with pytest.raises(DomainError):
            d.log_pmf(d.support_max() + 1)

    def test_log_pmf_formula(self):
        lam = 4.2
        d = TruncatedPoissonDist(lam, 0.95)
        q = d.quantile
        log_z = math.log(sum(lam**j * math.exp(-lam) / math.factorial(j) for j in range(q + 1)))
        for k in range(q + 1):
            expected = k * math.log(lam) - lam - math.lgamma(k + 1) - log_z
            assert d.log_pmf(k) == pytest.approx(expected, abs=1e-12)

    def test_continuity_across_support_jump(self):
        # the support grows by one atom at the smallest lam where the quantile jumps
        lo, hi = 2.0, 3.0
        q_lo = poisson_quantile(lo, 0.95)
        assert poisson_quantile(hi, 0.95) > q_lo
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if poisson_quantile(mid, 0.95) == q_lo else (lo, mid)
        before, after = TruncatedPoissonDist(lo).pmf(), TruncatedPoissonDist(hi).pmf()
        assert len(after) == len(before) + 1
        gained = after[-1]
        assert np.abs(after[:-1] - before).max() <= gained + 1e-12
        # the truncated tail beyond the quantile is at most 1 - delta of the raw mass
        assert gained <= 0.05 / 0.95 + 1e-12


class TestLogPmfNode:
    def test_values_match(self):
        d = TruncatedPoissonDist(3.1, 0.95, 1)
        g = ad.Graph()
        node = log_pmf_node(g.constant(math.log(3.1)), d.quantile + 1)
        np.testing.assert_allclose(node.data, d.log_pmf_vector(), atol=1e-13)

    @pytest.mark.parametrize("lam", [0.2, 1.0, 4.5, 17.0])
    def test_derivative_in_lambda_support_frozen(self, lam):
        n_atoms = poisson_quantile(lam, 0.95) + 1
        k = np.arange(n_atoms)

        def frozen_log_pmf(lam_):
            a = k * math.log(lam_) - lam_ - np.array([math.lgamma(j + 1) for j in k])
            return a - np.logaddexp.reduce(a)

        h = 1e-5
        fd = (frozen_log_pmf(lam + h) - frozen_log_pmf(lam - h)) / (2 * h)
        for ell in range(n_atoms):
            store = ad.ParamStore()
            store.add("raw", math.log(lam))
            g = ad.Graph()
            g.backward(log_pmf_node(g.param(store, "raw"), n_atoms)[ell])
            d_lam = store.grad("raw") / lam  # chain rule through lam = exp(raw)
            assert abs(d_lam - fd[ell]) <= 1e-6 * max(abs(fd[ell]), 1e-3)


class TestExpectation:
    def test_total_mass(self):
        assert TruncatedPoissonDist(7.7, 0.9).expectation(lambda ell: 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate(self):
        assert TruncatedPoissonDist(1e-8, 0.95, 1).expectation(lambda ell: ell) == pytest.approx(1.0, abs=1e-12)

    def test_mean_by_direct_sum(self):
        lam = 5.0
        q = quantile_by_summation(lam, 0.95)
        w = np.array([lam**j * math.exp(-lam) / math.factorial(j) for j in range(q + 1)])
        expected = float((w / w.sum()) @ np.arange(q + 1))
        d = TruncatedPoissonDist(lam, 0.95)
        assert d.expectation(lambda ell: ell) == pytest.approx(expected, abs=1e-12)
        assert d.mean() == pytest.approx(expected, abs=1e-12)


class TestPrior:
    def test_shifted(self):
        p = DepthPrior(0.5)
        assert p.pmf(0) == 0.0
        for ell in range(1, 8):
            assert p.pmf(ell) == pytest.approx(stats.poisson.pmf(ell - 1, 0.5), rel=1e-12)


class TestSupportBoundReport:
    def test_integer_margins_nonnegative(self):
        report = verify_theorem1(70)
        assert report.ok
        assert len(report.rows) == 70
        assert np.all(report.margins >= 0)

    def test_first_row(self):
        row = verify_theorem1(1).rows[0]
        assert row.upper_bound == 5.0
        assert row.lower_bound == pytest.approx(1 - LN2)

    def test_grid(self):
        assert bound_violations(np.round(np.arange(1, 701) * 0.1, 1)) == []

    def test_injected_bound_fails(self):
        report = verify_theorem1(10, upper=lambda k: 0.5 * k)
        assert not report.ok
        assert 1 in report.failures

    def test_csv(self):
        text = verify_theorem1(3).to_csv().splitlines()
        assert text[0] == "k,m,upper_bound,lower_bound,margin"
        assert len(text) == 4
