"""Retrain-and-validate experiments: does an explanation survive a fresh forest?

The protocol per repetition: remove a handful of query points, train a first
forest on the rest, solve for counterfactual explanations of the queries the
forest rejects, then train a second forest (fresh randomness, same data in
the fixed-data setting; the full data in the evolving setting) and record
whether each explanation still receives the target class.

All randomness flows from one master seed through per-repetition substreams
(query draw, both forest seeds, plausibility seeds), so a report is a pure
function of its configuration: reruns are byte-identical, and repetitions can
run in parallel without changing the output.  Wall-clock timings are the one
exception and are kept out of the report files (they get a sidecar file).
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from forestcf.data import Dataset, DistanceWeights, SyntheticSpec, generate_synthetic
from forestcf.ensemble import (
    ForestClassifier,
    ForestConfig,
    StumpEnsemble,
    train_forest,
)
from forestcf.plausibility import lof_penalty, train_isolation_forest
from forestcf.solver import CounterfactualProblem, solve_counterfactual
from forestcf.thresholds import (
    RobustnessSpec,
    majority_failure_probability,
    min_votes_for,
    select_threshold,
)

__all__ = [
    "ExperimentConfig",
    "SolveRecord",
    "ExperimentReport",
    "run_experiment",
    "run_fixed_data_experiment",
    "run_evolving_data_experiment",
    "measure_validity",
    "binomial_ci",
    "permutation_importance",
    "feature_change_stats",
    "stump_consistency_study",
    "estimate_base_learner_rate",
]

METHODS = ("naive", "direct-saa", "robust-saa", "convex", "iso-plausibility", "lof-plausibility")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a retrain experiment depends on, seeds included."""

    synthetic: SyntheticSpec
    data_seed: int = 0
    forest: ForestConfig = field(default_factory=ForestConfig)
    repetitions: int = 40
    queries_per_repetition: int = 5
    alpha_grid: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01)
    betas: tuple[float, ...] = (0.05, 0.1)
    methods: tuple[str, ...] = ("naive", "direct-saa")
    iso_contaminations: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    lof_weights: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2)
    train_fraction: float = 1.0
    master_seed: int = 0
    solver_timeout: float | None = None
    retrain_seed_mode: str = "independent"

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not all(0.0 < a < 1.0 for a in self.alpha_grid):
            raise ValueError("alpha grid must lie in (0, 1)")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; pick from {METHODS}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.retrain_seed_mode not in ("independent", "identical"):
            raise ValueError("retrain_seed_mode must be 'independent' or 'identical'")


@dataclass(frozen=True)
class SolveRecord:
    """One (method, parameters, repetition, query) solve and its fate."""

    method: str
    alpha: float | None
    beta: float | None
    param: float | None  # contamination or penalty weight
    repetition: int
    query_index: int
    tau: float
    min_votes: int
    distance: float
    nu: float
    votes: int
    score: float
    valid: bool
    optimal: bool
    n_changed: int
    deltas: tuple[tuple[int, float], ...]
    wall_time: float

    def key(self) -> tuple:
        return (self.method, self.alpha, self.beta, self.param)


@dataclass(frozen=True)
class AggregateRecord:
    method: str
    alpha: float | None
    beta: float | None
    param: float | None
    n: int
    n_valid: int
    validity: float
    ci_low: float
    ci_high: float
    mean_distance: float
    mean_nu: float
    mean_changed: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[SolveRecord]
    skipped_repetitions: list[tuple[int, str]]
    any_timeout: bool = False

    def aggregate(self) -> list[AggregateRecord]:
        groups: dict[tuple, list[SolveRecord]] = {}
        for row in self.rows:
            groups.setdefault(row.key(), []).append(row)
        out = []
        for key in sorted(groups, key=lambda k: tuple(str(p) for p in k)):
            rows = groups[key]
            n = len(rows)
            n_valid = sum(r.valid for r in rows)
            mean, lo, hi = binomial_ci(n_valid, n)
            out.append(
                AggregateRecord(
                    method=key[0],
                    alpha=key[1],
                    beta=key[2],
                    param=key[3],
                    n=n,
                    n_valid=n_valid,
                    validity=mean,
                    ci_low=lo,
                    ci_high=hi,
                    mean_distance=float(np.mean([r.distance for r in rows])),
                    mean_nu=float(np.mean([r.nu for r in rows])),
                    mean_changed=float(np.mean([r.n_changed for r in rows])),
                )
            )
        return out

    def audit(self) -> None:
        """Internal consistency: unrelaxed solves satisfied their threshold."""
        for row in self.rows:
            if row.nu == 0.0 and row.votes < row.min_votes:
                raise AssertionError(
                    f"audit failure: nu=0 but votes {row.votes} < {row.min_votes} in {row}"
                )

    # -- report files -------------------------------------------------------

    _ROW_COLUMNS = (
        "method alpha beta param repetition query_index tau min_votes distance nu "
        "votes score valid optimal n_changed changes"
    ).split()

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, bool):
            return "1" if value else "0"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def write_rows_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self._ROW_COLUMNS)
            for r in self.rows:
                changes = ";".join(f"{j}:{repr(d)}" for j, d in r.deltas)
                writer.writerow(
                    [
                        r.method,
                        self._fmt(r.alpha),
                        self._fmt(r.beta),
                        self._fmt(r.param),
                        r.repetition,
                        r.query_index,
                        self._fmt(r.tau),
                        r.min_votes,
                        self._fmt(r.distance),
                        self._fmt(r.nu),
                        r.votes,
                        self._fmt(r.score),
                        self._fmt(r.valid),
                        self._fmt(r.optimal),
                        r.n_changed,
                        changes,
                    ]
                )

    def write_aggregate_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                "method alpha beta param n n_valid validity ci_low ci_high "
                "mean_distance mean_nu mean_changed".split()
            )
            for a in self.aggregate():
                writer.writerow(
                    [
                        a.method,
                        self._fmt(a.alpha),
                        self._fmt(a.beta),
                        self._fmt(a.param),
                        a.n,
                        a.n_valid,
                        self._fmt(a.validity),
                        self._fmt(a.ci_low),
                        self._fmt(a.ci_high),
                        self._fmt(a.mean_distance),
                        self._fmt(a.mean_nu),
                        self._fmt(a.mean_changed),
                    ]
                )

    def write_validity_curve_csv(self, path: str | Path) -> None:
        """Validity against robustness target, one series per method/beta."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "beta", "target", "validity", "ci_low", "ci_high"])
            for a in self.aggregate():
                if a.alpha is None:
                    continue
                writer.writerow(
                    [
                        a.method,
                        self._fmt(a.beta),
                        self._fmt(1.0 - a.alpha),
                        self._fmt(a.validity),
                        self._fmt(a.ci_low),
                        self._fmt(a.ci_high),
                    ]
                )

    def write_pareto_csv(self, path: str | Path) -> None:
        """Distance/validity trade-off points for every method setting."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "alpha", "beta", "param", "mean_distance", "validity"])
            for a in self.aggregate():
                writer.writerow(
                    [
                        a.method,
                        self._fmt(a.alpha),
                        self._fmt(a.beta),
                        self._fmt(a.param),
                        self._fmt(a.mean_distance),
                        self._fmt(a.validity),
                    ]
                )

    def write_feature_change_csv(self, path: str | Path, n_features: int) -> None:
        counts, magnitudes = feature_change_stats(self, n_features=n_features)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "alpha", "beta", "param", "mean_changed"])
            for key, mean_changed in counts:
                writer.writerow(
                    [key[0], self._fmt(key[1]), self._fmt(key[2]), self._fmt(key[3]),
                     self._fmt(mean_changed)]
                )
            writer.writerow([])
            writer.writerow(["feature_index", "mean_abs_change_normalized"])
            for j, val in enumerate(magnitudes):
                writer.writerow([j, self._fmt(val)])

    def write_timings_csv(self, path: str | Path) -> None:
        """Wall times live outside the deterministic report files."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "alpha", "beta", "param", "repetition",
                             "query_index", "wall_time"])
            for r in self.rows:
                writer.writerow(
                    [r.method, self._fmt(r.alpha), self._fmt(r.beta), self._fmt(r.param),
                     r.repetition, r.query_index, repr(r.wall_time)]
                )

    def write_all(self, out_dir: str | Path, n_features: int) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_rows_csv(out / "solves.csv")
        self.write_aggregate_csv(out / "aggregate.csv")
        self.write_validity_curve_csv(out / "validity_curve.csv")
        self.write_pareto_csv(out / "pareto.csv")
        self.write_feature_change_csv(out / "feature_changes.csv", n_features)
        self.write_timings_csv(out / "timings.csv")


# ---------------------------------------------------------------------------
# metrics


def binomial_ci(successes: int, trials: int, *, level: float = 0.05):
    """Normal-approximation confidence interval for a Bernoulli mean."""
    if trials < 1:
        raise ValueError("cannot compute a confidence interval from zero trials")
    from forestcf.thresholds import normal_upper_quantile

    mean = successes / trials
    half = normal_upper_quantile(level) * math.sqrt(mean * (1.0 - mean) / trials)
    return mean, max(0.0, mean - half), min(1.0, mean + half)


def measure_validity(explanations, retrained_forest: ForestClassifier):
    """Fraction of explanations the retrained forest still classifies as 1.

    Returns (fraction, ci_low, ci_high, n_valid, n_total).
    """
    if not explanations:
        raise ValueError("cannot measure validity of an empty explanation list")
    X = np.vstack([e.x for e in explanations])
    valid = retrained_forest.predict(X) == 1
    mean, lo, hi = binomial_ci(int(valid.sum()), len(explanations))
    return mean, lo, hi, int(valid.sum()), len(explanations)


def permutation_importance(
    forest: ForestClassifier,
    X: np.ndarray,
    y: np.ndarray,
    *,
    shuffles: int = 10,
    seed: int = 0,
    normalize: bool = True,
) -> np.ndarray:
    """Mean accuracy drop per feature over seeded column shuffles."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("held-out set must be nonempty")
    base = float((forest.predict(X) == y).mean())
    d = X.shape[1]
    drops = np.zeros(d)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for j in range(d):
        for _ in range(shuffles):
            Xp = X.copy()
            Xp[:, j] = Xp[rng.permutation(X.shape[0]), j]
            drops[j] += base - float((forest.predict(Xp) == y).mean())
    drops /= shuffles
    if normalize and drops.max() > 0:
        drops = drops / drops.max()
    return drops


def feature_change_stats(report: ExperimentReport, *, n_features: int):
    """Changed-feature counts per method setting plus per-feature mean |delta|.

    A feature counts as changed when it moved by more than 1e-9 in normalized
    units; the per-feature magnitudes are scaled to max 1 for comparison
    against permutation importances.
    """
    if not report.rows:
        raise ValueError("report holds no solves")
    groups: dict[tuple, list[SolveRecord]] = {}
    for row in report.rows:
        groups.setdefault(row.key(), []).append(row)
    counts = [
        (key, float(np.mean([r.n_changed for r in groups[key]])))
        for key in sorted(groups, key=lambda k: tuple(str(p) for p in k))
    ]
    magnitude = np.zeros(n_features)
    for row in report.rows:
        for j, delta in row.deltas:
            magnitude[j] += abs(delta)
    magnitude /= len(report.rows)
    if magnitude.max() > 0:
        magnitude = magnitude / magnitude.max()
    return counts, magnitude


# ---------------------------------------------------------------------------
# the engine


def _method_settings(cfg: ExperimentConfig):
    """Flatten the method grids into (method, alpha, beta, param) tuples."""
    settings = []
    for method in cfg.methods:
        if method == "naive":
            settings.append((method, None, None, None))
        elif method == "direct-saa":
            settings.extend((method, a, None, None) for a in cfg.alpha_grid)
        elif method == "robust-saa":
            settings.extend(
                (method, a, b, None) for a in cfg.alpha_grid for b in cfg.betas
            )
        elif method == "convex":
            settings.append((method, None, None, None))
        elif method == "iso-plausibility":
            settings.extend((method, None, None, c) for c in cfg.iso_contaminations)
        elif method == "lof-plausibility":
            settings.extend((method, None, None, w) for w in cfg.lof_weights)
    return settings


def _threshold_for(method, alpha, beta, n_trees):
    if method in ("naive", "iso-plausibility", "lof-plausibility"):
        return 0.5, min_votes_for(0.5, n_trees)
    if method == "convex":
        return 1.0, n_trees
    mode = "direct-saa" if method == "direct-saa" else "robust-saa"
    res = select_threshold(
        RobustnessSpec(n_trees=n_trees, alpha=alpha, mode=mode, beta=beta)
    )
    return res.tau, res.min_votes


def _run_repetition(cfg: ExperimentConfig, data: Dataset, rep: int):
    """One repetition; a pure function of (config, data, rep)."""
    ss = np.random.SeedSequence(entropy=cfg.master_seed, spawn_key=(rep,))
    split_ss, query_ss, t0_ss, t1_ss, plaus_ss = ss.spawn(5)
    n = data.n
    rng_split = np.random.default_rng(split_ss)
    if cfg.train_fraction < 1.0:
        n_train = int(round(cfg.train_fraction * n))
        train_idx = np.sort(rng_split.choice(n, size=n_train, replace=False))
    else:
        train_idx = np.arange(n)

    rng_q = np.random.default_rng(query_ss)
    pool = train_idx[data.y[train_idx] == 0]
    if pool.size < cfg.queries_per_repetition:
        return rep, [], f"only {pool.size} class-0 points available", False
    query_idx = np.sort(rng_q.choice(pool, size=cfg.queries_per_repetition, replace=False))

    t0_rows = np.setdiff1d(train_idx, query_idx)
    t0_seed = int(t0_ss.generate_state(1)[0])
    t1_seed = t0_seed if cfg.retrain_seed_mode == "identical" else int(
        t1_ss.generate_state(1)[0]
    )
    subset = Dataset(schema=data.schema, X=data.X[t0_rows], y=data.y[t0_rows])
    t0 = train_forest(subset, cfg.forest, seed=t0_seed)
    if cfg.train_fraction < 1.0:
        t1_rows = np.setdiff1d(np.arange(n), query_idx)
    else:
        t1_rows = t0_rows
    t1 = train_forest(
        Dataset(schema=data.schema, X=data.X[t1_rows], y=data.y[t1_rows]),
        cfg.forest,
        seed=t1_seed,
    )

    eligible = [q for q in query_idx if t0.predict(data.X[q][None, :])[0] == 0]
    if not eligible:
        return rep, [], "no query predicted in the source class", False

    weights = DistanceWeights.for_schema(data.schema)
    target_samples = data.X[t0_rows][data.y[t0_rows] == 1]
    iso_cache = {}
    rows = []
    timed_out = False
    for method, alpha, beta, param in _method_settings(cfg):
        tau, mv = _threshold_for(method, alpha, beta, cfg.forest.n_trees)
        for q in eligible:
            x0 = data.X[q]
            plaus = None
            if method == "iso-plausibility":
                if param not in iso_cache:
                    idx = cfg.iso_contaminations.index(param)
                    iso_seed = int(plaus_ss.generate_state(idx + 1)[-1])
                    iso_cache[param] = train_isolation_forest(
                        target_samples, n_trees=50, contamination=param, seed=iso_seed
                    )
                plaus = iso_cache[param]
            elif method == "lof-plausibility":
                plaus = lof_penalty(
                    target_samples, x0, n_anchors=10, weight=param, feature_weights=weights.w
                )
            problem = CounterfactualProblem(
                forest=t0,
                x0=x0,
                schema=data.schema,
                min_votes=mv,
                tau=tau,
                weights=weights,
                plausibility=plaus,
                timeout=cfg.solver_timeout,
            )
            start = time.perf_counter()
            exp = solve_counterfactual(problem)
            wall = time.perf_counter() - start
            timed_out = timed_out or not exp.optimal
            valid = bool(t1.predict(exp.x[None, :])[0] == 1)
            rows.append(
                SolveRecord(
                    method=method,
                    alpha=alpha,
                    beta=beta,
                    param=param,
                    repetition=rep,
                    query_index=int(q),
                    tau=tau,
                    min_votes=mv,
                    distance=exp.distance,
                    nu=exp.nu,
                    votes=exp.votes,
                    score=exp.score,
                    valid=valid,
                    optimal=exp.optimal,
                    n_changed=len(exp.changed_features),
                    deltas=tuple((j, new - old) for j, old, new in exp.changed_features),
                    wall_time=wall,
                )
            )
    return rep, rows, None, timed_out


def run_experiment(
    cfg: ExperimentConfig, *, data: Dataset | None = None, n_jobs: int = 1
) -> ExperimentReport:
    """Run all repetitions; parallel and serial runs produce identical reports."""
    if data is None:
        data = generate_synthetic(cfg.synthetic, seed=cfg.data_seed)
    reps = range(cfg.repetitions)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_repetition_star, [(cfg, data, r) for r in reps]))
    else:
        results = [_run_repetition(cfg, data, r) for r in reps]
    results.sort(key=lambda t: t[0])
    rows: list[SolveRecord] = []
    skipped = []
    any_timeout = False
    for rep, rep_rows, skip_reason, timed_out in results:
        if skip_reason is not None:
            skipped.append((rep, skip_reason))
        rows.extend(rep_rows)
        any_timeout = any_timeout or timed_out
    report = ExperimentReport(
        config=cfg, rows=rows, skipped_repetitions=skipped, any_timeout=any_timeout
    )
    report.audit()
    return report


def _run_repetition_star(args):
    return _run_repetition(*args)


def run_fixed_data_experiment(
    cfg: ExperimentConfig, *, data: Dataset | None = None, n_jobs: int = 1
) -> ExperimentReport:
    """Both forests see the same training rows; only the seed differs."""
    return run_experiment(replace(cfg, train_fraction=1.0), data=data, n_jobs=n_jobs)


def run_evolving_data_experiment(
    cfg: ExperimentConfig, *, data: Dataset | None = None, n_jobs: int = 1
) -> ExperimentReport:
    """The first forest sees a split; the retrained one sees everything."""
    if cfg.train_fraction >= 1.0:
        cfg = replace(cfg, train_fraction=0.8)
    return run_experiment(cfg, data=data, n_jobs=n_jobs)


# ---------------------------------------------------------------------------
# consistency study over ensembles of stumps


def estimate_base_learner_rate(
    data: Dataset, x: np.ndarray, *, n_samples: int = 10_000, seed: int = 0
) -> float:
    """Monte Carlo estimate of the chance a freshly trained stump votes 1 at x.

    Trains ``n_samples`` independent stumps (one per substream) and returns
    the fraction voting for class 1; the ensemble-level retrain distribution
    follows from it because stumps within an ensemble are i.i.d.
    """
    ensemble = StumpEnsemble(n_trees=n_samples, random_state=seed).fit(data.X, data.y)
    return float(ensemble.predict_score(np.atleast_2d(x))[0])


def stump_consistency_study(
    data: Dataset,
    *,
    ensemble_sizes: tuple[int, ...] = (11, 51, 201, 1001),
    alpha: float = 0.2,
    mc_samples: int = 10_000,
    seed: int = 0,
) -> list[dict]:
    """Direct-SAA convergence over growing stump ensembles.

    For each ensemble size: train, solve the Direct-SAA counterfactual of a
    fixed query, estimate the solution's true retrain-survival probability by
    Monte Carlo over fresh stumps, and report the gap to the target 1 - alpha.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(0,))
    train_ss, query_ss, mc_ss = ss.spawn(3)
    rng = np.random.default_rng(query_ss)
    label0 = np.nonzero(data.y == 0)[0]
    if label0.size == 0:
        raise ValueError("study needs at least one class-0 sample to explain")
    x0 = data.X[label0[int(rng.integers(0, label0.size))]]  # one query for every size
    results = []
    for idx, n_trees in enumerate(ensemble_sizes):
        ensemble = StumpEnsemble(
            n_trees=n_trees, random_state=int(train_ss.generate_state(idx + 1)[-1])
        ).fit(data.X, data.y)
        res = select_threshold(RobustnessSpec(n_trees=n_trees, alpha=alpha, mode="direct-saa"))
        exp = solve_counterfactual(
            CounterfactualProblem(
                forest=ensemble,
                x0=x0,
                schema=data.schema,
                min_votes=res.min_votes,
                tau=res.tau,
            )
        )
        p_hat = estimate_base_learner_rate(
            data, exp.x, n_samples=mc_samples, seed=int(mc_ss.generate_state(idx + 1)[-1])
        )
        # exact survival probability of a fresh majority vote at rate p_hat
        robustness = 1.0 - majority_failure_probability(n_trees, p_hat, include_tie=False)
        results.append(
            {
                "n_trees": n_trees,
                "alpha": alpha,
                "distance": exp.distance,
                "p_hat": p_hat,
                "true_robustness": robustness,
                "gap": abs((1.0 - alpha) - robustness),
            }
        )
    return results
