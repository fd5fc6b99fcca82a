"""Command-line front end.

Subcommands: ``train``, ``explain``, ``threshold``, ``threshold-table``,
``experiment``, ``importance``.  Exit codes: 0 success, 2 configuration
error, 3 data error, 4 at least one solver hit its time budget (the report
is still written).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from forestcf.data import (
    DataError,
    Dataset,
    DistanceWeights,
    SchemaError,
    SyntheticSpec,
    denormalize,
    generate_synthetic,
    load_dataset,
    load_schema,
)
from forestcf.ensemble import (
    ForestConfig,
    ForestFormatError,
    deserialize_forest,
    serialize_forest,
    train_forest,
)
from forestcf.experiments import (
    ExperimentConfig,
    permutation_importance,
    run_evolving_data_experiment,
    run_fixed_data_experiment,
)
from forestcf.plausibility import lof_penalty, train_isolation_forest
from forestcf.solver import CounterfactualProblem, solve_counterfactual
from forestcf.thresholds import (
    MODES,
    RobustnessSpec,
    robustness_threshold,
    select_threshold,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TIMEOUT = 4


def _add_seed_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forestcf",
        description="Counterfactual explanations of tree ensembles that survive retraining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train and serialize a forest")
    p_train.add_argument("--data", type=Path, required=True)
    p_train.add_argument("--schema", type=Path, required=True)
    p_train.add_argument("--n-trees", type=int, default=100)
    p_train.add_argument("--max-depth", type=int, default=4)
    p_train.add_argument("--features-per-split", type=int, default=None)
    p_train.add_argument("--no-bootstrap", action="store_true")
    p_train.add_argument("--min-samples-leaf", type=int, default=1)
    _add_seed_out(p_train)

    p_explain = sub.add_parser("explain", help="solve counterfactuals for query rows")
    p_explain.add_argument("--forest", type=Path, required=True)
    p_explain.add_argument("--schema", type=Path, required=True)
    p_explain.add_argument("--query", type=Path, required=True, help="CSV of query rows")
    p_explain.add_argument("--alpha", type=float, default=0.2)
    p_explain.add_argument("--mode", choices=MODES, default="direct-saa")
    p_explain.add_argument("--beta", type=float, default=None)
    p_explain.add_argument("--target-class", type=int, choices=(0, 1), default=1)
    p_explain.add_argument("--plausibility", choices=("iso", "lof"), default=None)
    p_explain.add_argument("--contamination", type=float, default=0.1)
    p_explain.add_argument("--lof-weight", type=float, default=1.0, metavar="LAMBDA")
    p_explain.add_argument("--constraint-direction", choices=("le", "ge"), default="le")
    p_explain.add_argument("--data", type=Path, default=None,
                           help="training CSV (required for plausibility)")
    p_explain.add_argument("--timeout", type=float, default=None)
    _add_seed_out(p_explain)

    p_thr = sub.add_parser("threshold", help="print the score threshold for a setting")
    p_thr.add_argument("--n", type=int, required=True)
    p_thr.add_argument("--alpha", type=float, required=True)
    p_thr.add_argument("--beta", type=float, default=None)
    p_thr.add_argument("--mode", choices=MODES, default="direct-saa")

    p_tab = sub.add_parser("threshold-table", help="emit threshold sweep CSVs")
    p_tab.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200])
    p_tab.add_argument("--alphas", type=float, nargs="+", default=[0.1, 0.25, 0.5, 0.75])
    p_tab.add_argument("--max-size", type=int, default=50)
    p_tab.add_argument("--out", type=Path, default=Path("."))

    p_exp = sub.add_parser("experiment", help="run the retrain-and-validate protocol")
    p_exp.add_argument("--mode", choices=("fixed", "evolving"), default="fixed")
    p_exp.add_argument("--data", type=Path, default=None)
    p_exp.add_argument("--schema", type=Path, default=None)
    p_exp.add_argument("--n", type=int, default=2000, help="synthetic sample count")
    p_exp.add_argument("--continuous", type=int, default=4)
    p_exp.add_argument("--binary", type=int, default=0)
    p_exp.add_argument("--noise", type=float, default=0.15)
    p_exp.add_argument("--data-seed", type=int, default=0)
    p_exp.add_argument("--n-trees", type=int, default=100)
    p_exp.add_argument("--max-depth", type=int, default=4)
    p_exp.add_argument("--repetitions", type=int, default=40)
    p_exp.add_argument("--queries", type=int, default=5)
    p_exp.add_argument("--alphas", type=float, nargs="+",
                       default=[0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01])
    p_exp.add_argument("--betas", type=float, nargs="+", default=[0.05, 0.1])
    p_exp.add_argument("--methods", nargs="+", default=["naive", "direct-saa"])
    p_exp.add_argument("--contaminations", type=float, nargs="+",
                       default=[0.05, 0.1, 0.2, 0.3, 0.4, 0.5])
    p_exp.add_argument("--lof-weights", type=float, nargs="+",
                       default=[1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2])
    p_exp.add_argument("--train-fraction", type=float, default=0.8,
                       help="evolving mode only")
    p_exp.add_argument("--timeout", type=float, default=None)
    p_exp.add_argument("--jobs", type=int, default=1)
    _add_seed_out(p_exp)

    p_imp = sub.add_parser("importance", help="permutation feature importance")
    p_imp.add_argument("--forest", type=Path, required=True)
    p_imp.add_argument("--data", type=Path, required=True)
    p_imp.add_argument("--schema", type=Path, required=True)
    p_imp.add_argument("--shuffles", type=int, default=10)
    _add_seed_out(p_imp)

    return parser


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data, args.schema)
    config = ForestConfig(
        n_trees=args.n_trees,
        max_depth=args.max_depth,
        features_per_split=args.features_per_split,
        bootstrap=not args.no_bootstrap,
        min_samples_leaf=args.min_samples_leaf,
    )
    forest = train_forest(dataset, config, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "forest.json"
    serialize_forest(forest, path)
    acc = float((forest.predict(dataset.X) == dataset.y).mean())
    print(f"trained {config.n_trees} trees (depth <= {config.max_depth}) on "
          f"{dataset.n} rows; training accuracy {acc:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def _load_queries(path: Path, schema) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    missing = [c for c in schema.names if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    idx = [header.index(c) for c in schema.names]
    try:
        raw = np.array([[float(row[i]) for i in idx] for row in rows])
    except ValueError as exc:
        raise DataError(f"{path}: unparseable query cell: {exc}") from exc
    return raw


def _cmd_explain(args) -> int:
    forest = deserialize_forest(args.forest)
    schema = load_schema(args.schema)
    if any(
        f.raw_range is None and f.kind.value in ("continuous", "discrete")
        for f in schema.features
    ):
        if args.data is None:
            raise DataError("schema lacks raw ranges; pass --data to infer them")
        schema = load_dataset(args.data, schema).schema

    from forestcf.data import normalize  # local import keeps the header tidy

    raw_queries = _load_queries(args.query, schema)
    X_query = normalize(raw_queries, schema)

    spec = RobustnessSpec(
        n_trees=forest.n_trees,
        alpha=args.alpha,
        mode=args.mode,
        beta=args.beta if args.mode == "robust-saa" else None,
    )
    threshold = select_threshold(spec)
    weights = DistanceWeights.for_schema(schema)

    plaus_builder = None
    if args.plausibility is not None:
        if args.data is None:
            raise DataError("plausibility constraints need --data for target-class samples")
        train_ds = load_dataset(args.data, schema)
        target_samples = train_ds.X[train_ds.y == args.target_class]
        if args.plausibility == "iso":
            constraint = train_isolation_forest(
                target_samples,
                n_trees=50,
                contamination=args.contamination,
                seed=args.seed,
                direction=args.constraint_direction,
            )
            plaus_builder = lambda x0: constraint  # noqa: E731 - trained once
        else:
            plaus_builder = lambda x0: lof_penalty(  # noqa: E731
                target_samples,
                x0,
                n_anchors=10,
                weight=args.lof_weight,
                feature_weights=weights.w,
            )

    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "explanations.csv"
    any_timeout = False
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["query_index", "distance", "votes", "score", "nu", "optimal", "changed"]
            + [f"x_{name}" for name in schema.names]
        )
        for i, x0 in enumerate(X_query):
            problem = CounterfactualProblem(
                forest=forest,
                x0=x0,
                schema=schema,
                min_votes=threshold.min_votes,
                tau=threshold.tau,
                weights=weights,
                target_class=args.target_class,
                plausibility=plaus_builder(x0) if plaus_builder else None,
                timeout=args.timeout,
            )
            exp = solve_counterfactual(problem)
            any_timeout = any_timeout or not exp.optimal
            raw_x = denormalize(exp.x, schema)
            raw_x0 = raw_queries[i]
            changed = ";".join(
                f"{schema.names[j]}:{repr(raw_x0[j])}->{repr(float(raw_x[j]))}"
                for j, _, _ in exp.changed_features
            )
            writer.writerow(
                [i, repr(exp.distance), exp.votes, repr(exp.score), repr(exp.nu),
                 int(exp.optimal), changed]
                + [repr(float(v)) for v in raw_x]
            )
            print(
                f"query {i}: distance {exp.distance:.6f}, votes {exp.votes}/"
                f"{forest.n_trees}, nu {exp.nu:.4f}, "
                f"{len(exp.changed_features)} feature(s) changed"
            )
    print(f"wrote {out_path}")
    return EXIT_TIMEOUT if any_timeout else EXIT_OK


def _cmd_threshold(args) -> int:
    spec = RobustnessSpec(
        n_trees=args.n,
        alpha=args.alpha,
        mode=args.mode,
        beta=args.beta if args.mode == "robust-saa" else None,
    )
    result = select_threshold(spec)
    print(f"mode {spec.mode}")
    print(f"n_trees {spec.n_trees}")
    print(f"alpha {spec.alpha}")
    if spec.beta is not None:
        print(f"beta {spec.beta}")
    for key, value in result.as_record().items():
        if value is not None:
            print(f"{key} {value}")
    return EXIT_OK


def _cmd_threshold_table(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    # sweep of the threshold against the robustness target, one size per column
    targets = [0.5 + 0.01 * i for i in range(50)]
    path_a = args.out / "threshold_vs_target.csv"
    with open(path_a, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target"] + [f"n_{n}" for n in args.sizes])
        for target in targets:
            alpha = 1.0 - target
            writer.writerow(
                [repr(target)]
                + [repr(robustness_threshold(n, alpha)) for n in args.sizes]
            )
    # sweep against the ensemble size, one tolerance per column
    path_b = args.out / "threshold_vs_size.csv"
    with open(path_b, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_trees"] + [f"alpha_{a}" for a in args.alphas])
        for n in range(1, args.max_size + 1):
            writer.writerow(
                [n] + [repr(robustness_threshold(n, a)) for a in args.alphas]
            )
    print(f"wrote {path_a}")
    print(f"wrote {path_b}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    data = None
    if args.data is not None:
        if args.schema is None:
            raise DataError("--data needs --schema")
        data = load_dataset(args.data, args.schema)
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(
            n=args.n,
            n_continuous=args.continuous,
            n_binary=args.binary,
            noise=args.noise,
        ),
        data_seed=args.data_seed,
        forest=ForestConfig(n_trees=args.n_trees, max_depth=args.max_depth),
        repetitions=args.repetitions,
        queries_per_repetition=args.queries,
        alpha_grid=tuple(args.alphas),
        betas=tuple(args.betas),
        methods=tuple(args.methods),
        iso_contaminations=tuple(args.contaminations),
        lof_weights=tuple(args.lof_weights),
        train_fraction=args.train_fraction if args.mode == "evolving" else 1.0,
        master_seed=args.seed,
        solver_timeout=args.timeout,
    )
    runner = run_evolving_data_experiment if args.mode == "evolving" else run_fixed_data_experiment
    report = runner(cfg, data=data, n_jobs=args.jobs)
    n_features = data.schema.d if data is not None else cfg.synthetic.n_continuous + cfg.synthetic.n_binary
    report.write_all(args.out, n_features=n_features)
    for agg in report.aggregate():
        label = agg.method
        if agg.alpha is not None:
            label += f" alpha={agg.alpha}"
        if agg.beta is not None:
            label += f" beta={agg.beta}"
        if agg.param is not None:
            label += f" param={agg.param}"
        print(
            f"{label}: validity {agg.validity:.3f} "
            f"[{agg.ci_low:.3f}, {agg.ci_high:.3f}] ({agg.n_valid}/{agg.n}), "
            f"mean distance {agg.mean_distance:.4f}"
        )
    for rep, reason in report.skipped_repetitions:
        print(f"repetition {rep} skipped: {reason}")
    print(f"wrote report files to {args.out}")
    return EXIT_TIMEOUT if report.any_timeout else EXIT_OK


def _cmd_importance(args) -> int:
    forest = deserialize_forest(args.forest)
    dataset = load_dataset(args.data, args.schema)
    imp = permutation_importance(
        forest, dataset.X, dataset.y, shuffles=args.shuffles, seed=args.seed
    )
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "importance.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "importance"])
        for name, value in zip(dataset.schema.names, imp):
            writer.writerow([name, repr(float(value))])
    for name, value in zip(dataset.schema.names, imp):
        print(f"{name} {value:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


_HANDLERS = {
    "train": _cmd_train,
    "explain": _cmd_explain,
    "threshold": _cmd_threshold,
    "threshold-table": _cmd_threshold_table,
    "experiment": _cmd_experiment,
    "importance": _cmd_importance,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (DataError, SchemaError, ForestFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
