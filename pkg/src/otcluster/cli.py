"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bundle as bundle_io
from .bundle import BundleError, load_bundle, save_bundle
from .evaluate import estimate_k, evaluate_predictions
from .learner import NonFiniteLossError, forward, load_head
from .longtail import (
    DegenerateCountsError,
    InsufficientSourceError,
    LongTailSpec,
    group_assignment,
    sample_longtail,
    training_class_counts,
)
from .pipeline import (
    ConfigError,
    PipelineConfig,
    load_config,
    report,
    run_baseline_kmeans,
    run_pipeline,
    save_config,
    sweep,
)
from .rot import BracketFailure, RotConfig, solve_variant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("otcluster")


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="flat JSON pipeline configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--log-level", default="INFO")


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _load_matrix(path: Path) -> np.ndarray:
    meta = json.loads((path / "matrix.json").read_text(encoding="utf-8"))
    data = np.fromfile(path / "matrix.bin", dtype="<f4")
    return data.reshape(meta["n"], meta["dim"]).astype(np.float64)


def _save_matrix(m: np.ndarray, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "matrix.json").write_text(
        json.dumps({"n": m.shape[0], "dim": m.shape[1]}, sort_keys=True) + "\n", encoding="utf-8"
    )
    m.astype("<f4").tofile(path / "matrix.bin")


def cmd_sample_longtail(args) -> int:
    source = load_bundle(args.source)
    spec = LongTailSpec(
        gamma=args.gamma,
        known_ratio=args.known_ratio,
        labeled_ratio=args.labeled_ratio,
        seed=args.seed if args.seed is not None else 0,
        test_per_class=args.test_per_class,
    )
    out = sample_longtail(source, spec)
    save_bundle(out, args.out)
    m = out.manifest()
    log.info("sampled %d rows (%s)", m.n, m.split_counts)
    return EXIT_OK


def cmd_solve_rot(args) -> int:
    p = _load_matrix(args.predictions)
    cfg = RotConfig(variant=args.variant, lambda1=args.lambda1, lambda2=args.lambda2)
    plan, trace = solve_variant(p, cfg)
    out = Path(args.out)
    _save_matrix(plan.q, out / "plan")
    (out / "trace.json").write_text(
        json.dumps(
            {
                "objective": trace.objective,
                "row_residual": trace.row_residual,
                "col_residual": trace.col_residual,
                "beta": [list(map(float, b)) for b in trace.betas],
                "warnings": trace.warnings,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _pipeline_config(args)
    record = run_pipeline(bundle, cfg)
    if args.out:
        report([record], args.out)
    log.info("final acc %.4f", record.final_metrics.acc)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    test = bundle.test_idx
    if args.predictions:
        y_pred = _load_matrix(args.predictions).argmax(axis=1)
        if len(y_pred) != len(test):
            raise BundleError(f"{len(y_pred)} predictions for {len(test)} test rows")
    else:
        head = load_head(args.head)
        _, p = forward(head, bundle.embeddings[test])
        y_pred = p.argmax(axis=1)
    k = bundle.num_classes
    groups = group_assignment(training_class_counts(bundle, k))
    rep = evaluate_predictions(
        bundle.hidden_labels(test), y_pred, groups=groups, k=k,
        seed=args.seed if args.seed is not None else 0,
    )
    text = json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_estimate_k(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = bundle.train_idx
    k = estimate_k(
        bundle.embeddings[rows].astype(np.float64),
        args.k_prime,
        args.threshold,
        seed=args.seed if args.seed is not None else 0,
    )
    sys.stdout.write(f"{k}\n")
    return EXIT_OK


def cmd_run(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _pipeline_config(args)
    record = run_pipeline(bundle, cfg)
    out = args.out or "run-output"
    paths = report([record], out)
    if args.baseline:
        baseline = run_baseline_kmeans(bundle, seed=cfg.seed)
        Path(out, "baseline.json").write_text(
            json.dumps(baseline.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    log.info("report written to %s", paths["report"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = _pipeline_config(args)
    values = [float(v) for v in args.values.split(",")]
    spec = None
    if args.axis in ("gamma", "known_ratio"):
        spec = LongTailSpec(gamma=args.gamma, seed=cfg.seed, test_per_class=args.test_per_class)
    records = sweep(bundle, cfg, args.axis, values, longtail=spec)
    report(records, args.out or f"sweep-{args.axis}", axis_values=values)
    return EXIT_OK


def cmd_report(args) -> int:
    # re-emit report files from a saved record payload
    payload = json.loads(Path(args.record).read_text(encoding="utf-8"))
    out = Path(args.out or Path(args.record).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otcluster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-longtail", help="draw a long-tailed split from a balanced source")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--known-ratio", type=float, default=0.75)
    p.add_argument("--labeled-ratio", type=float, default=0.1)
    p.add_argument("--test-per-class", type=int, default=15)
    _add_common(p)
    p.set_defaults(func=cmd_sample_longtail, needs_out=True)

    p = sub.add_parser("solve-rot", help="solve the transport problem for a prediction matrix")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--variant", choices=["rot", "cot", "eot", "mot"], default="rot")
    p.add_argument("--lambda1", type=float, default=0.05)
    p.add_argument("--lambda2", type=float, default=2.0)
    _add_common(p)
    p.set_defaults(func=cmd_solve_rot, needs_out=True)

    p = sub.add_parser("train", help="run warm-up plus training rounds on a bundle")
    p.add_argument("--bundle", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predictions or a head checkpoint on TEST rows")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--predictions", type=Path)
    p.add_argument("--head", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("estimate-k", help="estimate the cluster count by over-clustering")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--k-prime", type=int, required=True)
    p.add_argument("--threshold", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("run", help="full pipeline with report files")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--baseline", action="store_true", help="also run the k-means baseline")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs along one configuration axis")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--axis", choices=["omega", "lambda2", "gamma", "known_ratio"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--gamma", type=float, default=10.0, help="base gamma for resampling axes")
    p.add_argument("--test-per-class", type=int, default=15)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-emit report files from a saved record")
    p.add_argument("--record", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(message)s")
    if getattr(args, "needs_out", False) and args.out is None:
        log.error("--out is required for this command")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (BracketFailure, NonFiniteLossError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (BundleError, InsufficientSourceError, DegenerateCountsError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
