"""Counterfactual explanations of randomized tree ensembles that survive retraining.

A retrained random forest gives each point a fresh Binomial(N, p) vote count,
so an explanation that barely clears the majority today flips tomorrow with
probability near one half.  This package computes the vote threshold that
keeps explanations valid with a chosen probability, searches for the nearest
explanation meeting it exactly, and ships the simulation harness measuring
how often explanations survive an actual retrain.
"""

from forestcf.data import (
    Actionability,
    DataError,
    Dataset,
    DatasetSchema,
    DistanceWeights,
    FeatureKind,
    FeatureSpec,
    SchemaError,
    SyntheticSpec,
    denormalize,
    generate_synthetic,
    load_dataset,
    load_schema,
    normalize,
)
from forestcf.ensemble import (
    ForestClassifier,
    ForestConfig,
    StumpEnsemble,
    deserialize_forest,
    serialize_forest,
    train_forest,
    train_stump_ensemble,
)
from forestcf.experiments import (
    ExperimentConfig,
    ExperimentReport,
    measure_validity,
    permutation_importance,
    run_evolving_data_experiment,
    run_fixed_data_experiment,
    stump_consistency_study,
)
from forestcf.plausibility import (
    AnomalyConstraint,
    IsolationForestModel,
    LofPenalty,
    lof_penalty,
    train_isolation_forest,
)
from forestcf.solver import (
    CounterfactualProblem,
    Explanation,
    brute_force_counterfactual,
    build_candidate_grid,
    solve_counterfactual,
)
from forestcf.thresholds import (
    RobustnessSpec,
    ThresholdResult,
    binomial_cdf,
    finite_sample_bound,
    majority_failure_probability,
    robust_saa_threshold,
    robustness_threshold,
    select_threshold,
)

__version__ = "0.1.0"
