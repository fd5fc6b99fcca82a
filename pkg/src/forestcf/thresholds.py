"""Score thresholds that make counterfactual explanations survive retraining.

A majority-vote ensemble of N independently trained base learners classifies a
point as the target class whenever at least half the learners vote for it.
When the ensemble is retrained on the same data, each learner's vote at a
fixed point x is an independent Bernoulli draw with some success rate p, so
the retrained vote count is Binomial(N, p).  Requiring the retrained majority
to hold with probability at least 1 - alpha therefore translates into a lower
bound on p, and - through the trained ensemble's score as a plug-in estimate
of p - into a score threshold tau > 1/2 for the counterfactual search.

This module computes those thresholds:

* ``majority_failure_probability`` - the binomial tail that the retrained
  ensemble misses the majority,
* ``robustness_threshold`` - its inverse in p (the minimum per-learner
  success rate for a given tolerance),
* ``robust_saa_threshold`` - the same threshold inflated by an Agresti-Coull
  confidence margin to hedge against the plug-in estimation error,
* ``select_threshold`` - the front door mapping a robustness mode to a
  concrete score threshold and minimum vote count,
* ``finite_sample_bound`` - a computable certificate for the unanimity
  (tau = 1) approximation with mixed discrete/continuous features.

Even/odd convention.  For odd N the majority is lost exactly when the vote
count S satisfies S <= (N-1)/2, and both conventions below agree.  For even N
the tie S = N/2 still wins the majority (score 1/2 counts as the target
class), so the exact probability of losing it is P(S <= N/2 - 1).  The
monotonicity guarantees used throughout (threshold decreasing in ensemble
size, >= 1/2 whenever alpha <= 1/2) hold for the slightly conservative
convention that counts the tie as a failure, i.e. P(S <= N/2).  That
conservative reading is the default everywhere; pass ``include_tie=False``
to get the exact strict tail instead.  The two differ only for even N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from statistics import NormalDist

from scipy.special import betainc

__all__ = [
    "binomial_cdf",
    "majority_failure_probability",
    "robustness_threshold",
    "agresti_coull_center",
    "inflate_threshold",
    "robust_saa_threshold",
    "min_votes_for",
    "finite_sample_bound",
    "is_vacuous",
    "RobustnessSpec",
    "ThresholdResult",
    "select_threshold",
    "MODES",
]

#: Robustness modes accepted by :func:`select_threshold` and the CLI.
MODES = ("naive", "direct-saa", "robust-saa", "convex")

_EXACT_SUM_MAX_N = 64
_BISECT_TOL = 1e-10


def _check_n(n: int) -> int:
    if not isinstance(n, (int,)) or isinstance(n, bool) or n < 1:
        raise ValueError(f"ensemble size must be a positive integer, got {n!r}")
    return n


def _check_prob(value: float, name: str, *, open_interval: bool = False) -> float:
    v = float(value)
    if math.isnan(v):
        raise ValueError(f"{name} must not be NaN")
    if open_interval:
        if not (0.0 < v < 1.0):
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    elif not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return v


def binomial_cdf(k: int, n: int, p: float) -> float:
    """P(S <= k) for S ~ Binomial(n, p).

    Uses exact probability-mass summation for n <= 64 and the regularized
    incomplete beta identity B(k; n, p) = I_{1-p}(n-k, k+1) above that.
    Absolute error is below 1e-12 over the full parameter range.
    """
    n = _check_n(n)
    p = _check_prob(p, "p")
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    if k == n:
        return 1.0
    if p == 0.0:
        return 1.0
    if p == 1.0:
        return 0.0
    if n <= _EXACT_SUM_MAX_N:
        q = 1.0 - p
        terms = [math.comb(n, j) * p**j * q ** (n - j) for j in range(k + 1)]
        return min(1.0, math.fsum(terms))
    return float(betainc(n - k, k + 1, 1.0 - p))


def _majority_cutoff(n: int, include_tie: bool) -> int:
    # Highest vote count that counts as "failed" under the chosen convention.
    return n // 2 if include_tie else math.ceil(n / 2) - 1


def majority_failure_probability(n: int, p: float, *, include_tie: bool = True) -> float:
    """Probability that a freshly trained n-ensemble misses the majority at a point.

    Each base learner votes for the target class independently with
    probability ``p``; the ensemble fails when fewer than half the votes land
    (under the default convention an even-N tie also counts as a failure, see
    the module docstring).  Decreasing and invertible in ``p``.
    """
    n = _check_n(n)
    p = _check_prob(p, "p")
    return binomial_cdf(_majority_cutoff(n, include_tie), n, p)


def robustness_threshold(
    n: int,
    alpha: float,
    *,
    include_tie: bool = True,
    tol: float = _BISECT_TOL,
) -> float:
    """Minimum per-learner success rate p with failure probability <= alpha.

    Solves ``majority_failure_probability(n, p) == alpha`` for p by bisection
    on [0, 1] (the failure probability is strictly decreasing in p) to an
    absolute tolerance of ``tol``.  For alpha <= 1/2 the result is always
    >= 1/2, and it decreases as the ensemble grows.
    """
    n = _check_n(n)
    alpha = _check_prob(alpha, "alpha", open_interval=True)
    k = _majority_cutoff(n, include_tie)
    lo, hi = 0.0, 1.0  # failure prob is 1 at p=0 and 0 at p=1
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binomial_cdf(k, n, mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def normal_upper_quantile(beta: float) -> float:
    """Two-sided standard-normal quantile: Phi^{-1}(1 - beta/2)."""
    beta = _check_prob(beta, "beta", open_interval=True)
    return NormalDist().inv_cdf(1.0 - beta / 2.0)


def agresti_coull_center(n: int, p: float) -> float:
    """Agresti-Coull center (n*p + 2) / (n + 4) used by the inflated threshold."""
    n = _check_n(n)
    p = _check_prob(p, "p")
    return (n * p + 2.0) / (n + 4.0)


def inflate_threshold(n: int, p_min: float, beta: float) -> float:
    """Add an Agresti-Coull confidence margin on top of a per-learner threshold.

    Returns ``p_min + z * sqrt(rho_ac * (1 - rho_ac) / n)`` clamped to 1,
    with ``rho_ac = agresti_coull_center(n, p_min)`` and
    ``z = Phi^{-1}(1 - beta/2)``.
    """
    rho_ac = agresti_coull_center(n, p_min)
    z = normal_upper_quantile(beta)
    return min(1.0, p_min + z * math.sqrt(rho_ac * (1.0 - rho_ac) / n))


def robust_saa_threshold(n: int, alpha: float, beta: float, *, include_tie: bool = True) -> float:
    """Robustness threshold inflated by an Agresti-Coull confidence margin.

    The trained ensemble's score is only an N-sample estimate of the true
    per-learner success rate; inflating the plug-in threshold hedges against
    that estimation noise.  The result is always at least the uninflated
    threshold; smaller ``beta`` means a wider margin (beta -> 1 removes it).
    """
    p_min = robustness_threshold(n, alpha, include_tie=include_tie)
    return inflate_threshold(n, p_min, beta)


def min_votes_for(tau: float, n: int) -> int:
    """Smallest integer vote count k with k/n >= tau, compared exactly.

    The comparison runs in rational arithmetic over the binary value of
    ``tau`` so that e.g. tau = 0.5 with odd n never picks up a spurious
    extra vote from float rounding.
    """
    n = _check_n(n)
    tau = _check_prob(tau, "tau")
    votes = math.ceil(Fraction(n) * Fraction(tau))
    return min(max(votes, 0), n)


def finite_sample_bound(n: int, alpha: float, *, n_continuous: int, n_features: int) -> float:
    """Failure-probability bound for the unanimity approximation.

    For an ensemble of convex base learners over ``n_features`` features of
    which ``n_continuous`` are continuous, a solution satisfying all n
    learners simultaneously fails to be a robust counterfactual with
    probability at most

        delta = exp[(2^(d-k) * (k+1) - 1) * (log(1/alpha) + alpha) - (alpha/2) * n]

    with d = n_features and k = n_continuous.  Computed in log-space; returns
    ``inf`` when 2^(d-k) itself overflows (d - k > 60).  Values >= 1 carry no
    information - see :func:`is_vacuous`.
    """
    n = _check_n(n)
    alpha = _check_prob(alpha, "alpha", open_interval=True)
    d, k = int(n_features), int(n_continuous)
    if not 0 <= k <= d:
        raise ValueError(f"need 0 <= n_continuous <= n_features, got {k}, {d}")
    if d - k > 60:
        return math.inf
    log_delta = (2.0 ** (d - k) * (k + 1) - 1.0) * (math.log(1.0 / alpha) + alpha) - 0.5 * alpha * n
    if log_delta > 700.0:  # exp would overflow; the bound is vacuous anyway
        return math.inf
    return math.exp(log_delta)


def is_vacuous(delta: float) -> bool:
    """True when a finite-sample bound carries no information (delta >= 1)."""
    return not delta < 1.0


@dataclass(frozen=True)
class RobustnessSpec:
    """How conservative the counterfactual score threshold should be.

    ``mode`` is one of ``naive`` (plain majority, tau = 1/2), ``direct-saa``
    (plug-in robustness threshold), ``robust-saa`` (plug-in threshold plus
    Agresti-Coull margin at confidence ``beta``) or ``convex`` (unanimity,
    tau = 1).  ``alpha`` is the retraining-failure tolerance.
    """

    n_trees: int
    alpha: float
    mode: str = "direct-saa"
    beta: float | None = None
    include_tie: bool = True

    def __post_init__(self) -> None:
        _check_n(self.n_trees)
        _check_prob(self.alpha, "alpha", open_interval=True)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "robust-saa":
            if self.beta is None:
                raise ValueError("robust-saa mode requires beta")
            _check_prob(self.beta, "beta", open_interval=True)
        elif self.beta is not None:
            raise ValueError(f"beta is only meaningful for robust-saa, got mode {self.mode!r}")


@dataclass(frozen=True)
class ThresholdResult:
    """A resolved score threshold plus the intermediate quantities behind it.

    ``min_votes`` is the smallest vote count whose score fraction clears
    ``tau``; fields that a mode does not use are None.
    """

    tau: float
    min_votes: int
    p_star: float | None = None
    rho_ac: float | None = None
    rho_star: float | None = None
    z_beta: float | None = None

    def as_record(self) -> dict[str, object]:
        return {
            "tau": self.tau,
            "min_votes": self.min_votes,
            "p_star": self.p_star,
            "rho_ac": self.rho_ac,
            "rho_star": self.rho_star,
            "z_beta": self.z_beta,
        }


def select_threshold(spec: RobustnessSpec) -> ThresholdResult:
    """Map a robustness mode to the score threshold the solver should enforce."""
    n = spec.n_trees
    if spec.mode == "naive":
        return ThresholdResult(tau=0.5, min_votes=min_votes_for(0.5, n))
    if spec.mode == "convex":
        return ThresholdResult(tau=1.0, min_votes=n)
    p_star = robustness_threshold(n, spec.alpha, include_tie=spec.include_tie)
    if spec.mode == "direct-saa":
        return ThresholdResult(tau=p_star, min_votes=min_votes_for(p_star, n), p_star=p_star)
    rho_ac = agresti_coull_center(n, p_star)
    z = normal_upper_quantile(spec.beta)
    rho_star = inflate_threshold(n, p_star, spec.beta)
    return ThresholdResult(
        tau=rho_star,
        min_votes=min_votes_for(rho_star, n),
        p_star=p_star,
        rho_ac=rho_ac,
        rho_star=rho_star,
        z_beta=z,
    )
