import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestcf.thresholds import (
    inflate_threshold,
    MODES,
    RobustnessSpec,
    agresti_coull_center,
    binomial_cdf,
    finite_sample_bound,
    is_vacuous,
    majority_failure_probability,
    min_votes_for,
    normal_upper_quantile,
    robust_saa_threshold,
    robustness_threshold,
    select_threshold,
)


def exact_binomial_cdf(k: int, n: int, p: Fraction) -> Fraction:
    """Independent oracle: rational pmf summation, no floats anywhere."""
    q = 1 - p
    return sum(Fraction(math.comb(n, j)) * p**j * q ** (n - j) for j in range(k + 1))


class TestBinomialCdf:
    def test_full_support_is_one(self):
        assert binomial_cdf(2, 2, 0.5) == 1.0

    def test_p_zero_forces_no_successes(self):
        assert binomial_cdf(0, 3, 0.0) == 1.0

    def test_two_coin_enumeration(self):
        # S <= 1 excludes only HH among the 4 equiprobable outcomes.
        assert binomial_cdf(1, 2, 0.5) == pytest.approx(0.75, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 5, 17, 64, 65, 101, 200])
    def test_matches_rational_oracle(self, n):
        for num in range(0, 21):
            p = Fraction(num, 20)
            for k in (0, n // 3, n // 2, n - 1, n):
                expected = float(exact_binomial_cdf(k, n, p))
                assert binomial_cdf(k, n, float(p)) == pytest.approx(expected, abs=1e-12)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            binomial_cdf(3, 2, 0.5)
        with pytest.raises(ValueError):
            binomial_cdf(-1, 2, 0.5)
        with pytest.raises(ValueError):
            binomial_cdf(1, 2, 1.5)
        with pytest.raises(ValueError):
            binomial_cdf(1, 0, 0.5)


class TestMajorityFailureProbability:
    def test_odd_three_at_half(self):
        assert majority_failure_probability(3, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_p_zero_always_fails(self):
        for n in (1, 2, 7, 100):
            assert majority_failure_probability(n, 0.0) == 1.0

    def test_even_two_at_half_strict_reading(self):
        # Without the tie, failing needs zero votes out of two.
        assert majority_failure_probability(2, 0.5, include_tie=False) == pytest.approx(
            0.25, abs=1e-12
        )

    def test_even_two_at_half_conservative_reading(self):
        # The default also counts the 1-1 split as a failure.
        assert majority_failure_probability(2, 0.5) == pytest.approx(0.75, abs=1e-12)

    def test_conventions_agree_for_odd_n(self):
        for n in (1, 3, 9, 51):
            for p in (0.1, 0.5, 0.9):
                assert majority_failure_probability(n, p) == majority_failure_probability(
                    n, p, include_tie=False
                )

    @pytest.mark.parametrize("n", range(1, 41))
    def test_strictly_decreasing_in_p(self, n):
        # Strict monotonicity is checked away from the saturated float tails
        # (values indistinguishable from 0 or 1 at double precision).
        grid = [i / 100 for i in range(101)]
        vals = [majority_failure_probability(n, p) for p in grid]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        for a, b in zip(vals, vals[1:]):
            if 1e-12 < b and a < 1.0 - 1e-12:
                assert a > b

    @pytest.mark.parametrize("n", range(1, 21))
    def test_small_n_oracle_grid(self, n):
        for num in range(0, 21):
            p = Fraction(num, 20)
            expected = float(exact_binomial_cdf(n // 2, n, p))
            assert majority_failure_probability(n, float(p)) == pytest.approx(
                expected, abs=1e-12
            )


class TestRobustnessThreshold:
    def test_recovers_naive_condition_for_odd_n(self):
        assert robustness_threshold(101, 0.5) == pytest.approx(0.5, abs=1e-9)

    def test_three_trees_closed_form(self):
        # Failure prob of 3 trees is (1-p)^2 (1+2p); bisect the polynomial directly.
        lo, hi = 0.0, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if (1 - mid) ** 2 * (1 + 2 * mid) > 0.25:
                lo = mid
            else:
                hi = mid
        assert robustness_threshold(3, 0.25) == pytest.approx(0.5 * (lo + hi), abs=1e-9)
        assert robustness_threshold(3, 0.25) == pytest.approx(0.674, abs=1e-3)

    def test_monotone_in_tolerance(self):
        for n in (10, 11, 100, 101):
            assert robustness_threshold(n, 0.1) > robustness_threshold(n, 0.3)

    def test_inverse_of_failure_probability(self):
        for n in (7, 20, 100):
            for alpha in (0.05, 0.2, 0.5, 0.8):
                p = robustness_threshold(n, alpha)
                assert majority_failure_probability(n, p) == pytest.approx(alpha, abs=1e-7)

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=150),
        alpha=st.floats(min_value=0.01, max_value=0.5),
    )
    def test_at_least_half_when_tolerance_at_most_half(self, n, alpha):
        assert robustness_threshold(n, alpha) >= 0.5 - 1e-9

    def test_parity_chains(self):
        # Growing the ensemble never tightens the per-learner requirement:
        # within each parity for alpha <= 1/2, and odd below even for all alpha.
        alphas_half = [0.05 * i for i in range(1, 11)]
        for m in range(1, 26):
            for alpha in alphas_half:
                assert (
                    robustness_threshold(2 * m + 3, alpha)
                    <= robustness_threshold(2 * m + 1, alpha) + 1e-9
                )
                assert (
                    robustness_threshold(2 * m + 2, alpha)
                    <= robustness_threshold(2 * m, alpha) + 1e-9
                )
            for alpha in [0.05 * i for i in range(1, 20)]:
                assert (
                    robustness_threshold(2 * m + 1, alpha)
                    <= robustness_threshold(2 * m, alpha) + 1e-9
                )


class TestRobustSaaThreshold:
    def test_agresti_coull_center_is_symmetric_at_half(self):
        assert agresti_coull_center(100, 0.5) == pytest.approx(52 / 104, abs=1e-15)

    def test_hand_computed_inflation(self):
        # At p_min = 0.5 the center is (50 + 2)/104 = 0.5, so the margin is
        # exactly z * sqrt(0.25/100) = 1.959964 * 0.05.
        rho = inflate_threshold(100, 0.5, 0.05)
        assert rho == pytest.approx(0.5 + 1.9599639845400536 * 0.05, abs=1e-12)
        assert rho == pytest.approx(0.598, abs=1e-3)

    def test_assembled_threshold_uses_internal_p(self):
        p = robustness_threshold(101, 0.5)  # = 0.5 up to bisection tolerance
        assert robust_saa_threshold(101, 0.5, 0.05) == pytest.approx(
            inflate_threshold(101, p, 0.05), abs=1e-12
        )

    def test_always_at_least_direct_threshold(self):
        for n in (11, 100, 400):
            for alpha in (0.05, 0.2, 0.5):
                for beta in (0.001, 0.05, 0.1, 0.5, 0.999):
                    assert robust_saa_threshold(n, alpha, beta) >= robustness_threshold(
                        n, alpha
                    )

    def test_decreasing_in_beta(self):
        betas = [0.01, 0.05, 0.1, 0.5, 0.9]
        vals = [robust_saa_threshold(100, 0.2, b) for b in betas]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_wide_confidence_recovers_direct(self):
        # beta -> 1 sends the normal quantile to zero and removes the margin.
        assert robust_saa_threshold(100, 0.2, 1 - 1e-12) == pytest.approx(
            robustness_threshold(100, 0.2), abs=1e-6
        )

    def test_clamped_to_one(self):
        assert robust_saa_threshold(5, 0.01, 0.001) <= 1.0


class TestMinVotes:
    def test_exact_rational_comparison(self):
        assert min_votes_for(0.5, 101) == 51
        assert min_votes_for(0.5, 100) == 50
        assert min_votes_for(1.0, 7) == 7
        assert min_votes_for(0.0, 7) == 0

    def test_definition_holds(self):
        for n in (3, 10, 101):
            for tau in (0.3, 0.5, 0.57, 0.99):
                k = min_votes_for(tau, n)
                assert Fraction(k, n) >= Fraction(tau)
                if k > 0:
                    assert Fraction(k - 1, n) < Fraction(tau)


class TestSelectThreshold:
    def test_naive_is_plain_majority(self):
        for n in (2, 101, 400):
            res = select_threshold(RobustnessSpec(n_trees=n, alpha=0.2, mode="naive"))
            assert res.tau == 0.5
            assert res.min_votes == min_votes_for(0.5, n)
            assert res.p_star is None

    def test_convex_requires_unanimity(self):
        res = select_threshold(RobustnessSpec(n_trees=57, alpha=0.2, mode="convex"))
        assert res.tau == 1.0
        assert res.min_votes == 57

    def test_direct_saa_odd_half_recovers_naive(self):
        res = select_threshold(RobustnessSpec(n_trees=101, alpha=0.5, mode="direct-saa"))
        assert res.tau == pytest.approx(0.5, abs=1e-9)
        assert res.min_votes == 51

    def test_robust_saa_fields_populated(self):
        res = select_threshold(
            RobustnessSpec(n_trees=100, alpha=0.2, mode="robust-saa", beta=0.05)
        )
        assert res.rho_star == res.tau
        assert res.rho_star >= res.p_star
        assert res.z_beta == pytest.approx(1.9599639845400536)
        assert 0.5 <= res.p_star <= 1.0

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            RobustnessSpec(n_trees=10, alpha=0.2, mode="bogus")
        with pytest.raises(ValueError):
            RobustnessSpec(n_trees=10, alpha=0.2, mode="robust-saa")  # missing beta
        with pytest.raises(ValueError):
            RobustnessSpec(n_trees=10, alpha=0.2, mode="naive", beta=0.05)
        with pytest.raises(ValueError):
            RobustnessSpec(n_trees=10, alpha=1.5)
        with pytest.raises(ValueError):
            RobustnessSpec(n_trees=0, alpha=0.2)
        assert set(MODES) == {"naive", "direct-saa", "robust-saa", "convex"}


class TestFiniteSampleBound:
    def test_hand_computed_value(self):
        # 2^0 * 3 - 1 = 2 planes, exponent 2*(ln 10 + 0.1) - 5.
        expected = math.exp(2 * (math.log(10) + 0.1) - 5)
        got = finite_sample_bound(100, 0.1, n_continuous=2, n_features=2)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.823, abs=1e-3)

    def test_strictly_decreasing_in_ensemble_size(self):
        d1 = finite_sample_bound(1000, 0.1, n_continuous=2, n_features=2)
        d2 = finite_sample_bound(2000, 0.1, n_continuous=2, n_features=2)
        assert d2 < d1

    def test_overflow_reported_vacuous(self):
        assert math.isinf(finite_sample_bound(100, 0.1, n_continuous=0, n_features=61))
        assert is_vacuous(finite_sample_bound(100, 0.1, n_continuous=0, n_features=61))

    def test_tolerance_near_one_with_no_features(self):
        # k = d = 0 leaves a single plane, exponent -> -N/2 + small.
        delta = finite_sample_bound(1000, 0.999, n_continuous=0, n_features=0)
        assert delta < 1.0
        assert not is_vacuous(delta)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            finite_sample_bound(100, 0.1, n_continuous=3, n_features=2)


def test_normal_upper_quantile_matches_reference():
    assert normal_upper_quantile(0.05) == pytest.approx(1.959964, abs=1e-6)
    assert normal_upper_quantile(1 - 1e-9) == pytest.approx(0.0, abs=1e-6)
