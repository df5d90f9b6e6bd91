"""Orchestration: warm-up, then rounds of (predict, transport, filter, train).

Each round solves the transport problem on the training rows' current
predictions, overwrites the labeled rows' pseudo-labels with their true
labels, selects the clean subset, and trains the head. Reports are written
as deterministic JSON: identical bundle/config/seed gives identical bytes.
Wall-clock timings go to a separate file so they never perturb the report.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .bundle import DatasetBundle, save_bundle
from .evaluate import MetricsReport, evaluate_predictions, kmeans
from .learner import (
    HeadParameters,
    OptState,
    TrainConfig,
    forward,
    init_head,
    save_head,
    supervised_warmup,
    train_epoch,
)
from .longtail import LongTailSpec, group_assignment, sample_longtail, training_class_counts
from .noise import FilterConfig, clean_union, distribution_aware_select, per_sample_loss, quality_aware_select
from .rot import PseudoLabelSet, RotConfig, pseudo_labels_from_plan, solve_variant


@dataclass
class PipelineConfig:
    rot: RotConfig = field(default_factory=RotConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rounds: int = 5
    warmup_epochs: int = 10
    eval_each_round: bool = True
    seed: int = 0
    out_dir: str | None = None
    # stop early when the clean set changes by less than this fraction of N
    clean_stop_frac: float = 0.01

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def config_hash(self) -> str:
        blob = json.dumps(_config_to_flat(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunRecord:
    metrics: list[MetricsReport] = field(default_factory=list)
    clean_counts: list[int] = field(default_factory=list)
    betas: list[list[float]] = field(default_factory=list)
    loss_totals: list[float] = field(default_factory=list)
    head_path: str | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)
    failed_round: int | None = None
    config_hash: str = ""
    seed: int = 0

    @property
    def final_metrics(self) -> MetricsReport:
        return self.metrics[-1]


def _predictions(head: HeadParameters, bundle: DatasetBundle, rows: np.ndarray) -> np.ndarray:
    _, p = forward(head, bundle.embeddings[rows])
    return p


def _known_groups(bundle: DatasetBundle, k: int) -> np.ndarray:
    counts = training_class_counts(bundle, k)
    return group_assignment(counts)


def _evaluate_test(head, bundle, k, seed, config_hash) -> MetricsReport:
    test = bundle.test_idx
    _, p = forward(head, bundle.embeddings[test])
    y_pred = np.argmax(p, axis=1)
    y_true = bundle.hidden_labels(test)
    return evaluate_predictions(
        y_true, y_pred, groups=_known_groups(bundle, k), k=k, seed=seed, config_hash=config_hash
    )


def run_pipeline(bundle: DatasetBundle, cfg: PipelineConfig) -> RunRecord:
    """Warm-up, iterate pseudo-label/filter/train rounds, evaluate on TEST rows."""
    if bundle.labeled_idx.size == 0:
        raise ValueError("the pipeline needs labeled rows for warm-up")
    k = bundle.num_classes
    chash = cfg.config_hash()
    record = RunRecord(config_hash=chash, seed=cfg.seed)
    rng = np.random.default_rng((cfg.seed, 0xC1))
    head = init_head(bundle.dim, cfg.train.d_hidden, cfg.train.d_proj, k, rng)

    t0 = time.perf_counter()
    head = supervised_warmup(head, bundle, cfg.train, cfg.warmup_epochs)
    record.stage_seconds["warmup"] = time.perf_counter() - t0

    train_rows = bundle.train_idx
    visible = bundle.training_labels()
    labeled_mask = visible[train_rows] >= 0
    labeled_targets = visible[train_rows][labeled_mask]

    prev_clean: np.ndarray | None = None
    epoch_counter = 0
    opt_state = OptState.fresh(head)
    for rnd in range(cfg.rounds):
        t0 = time.perf_counter()
        try:
            p = _predictions(head, bundle, train_rows)
            plan, _trace = solve_variant(p, cfg.rot)
            pseudo = pseudo_labels_from_plan(plan)

            # supervision is never forgotten: labeled rows carry their true labels
            pseudo.soft[labeled_mask] = 0.0
            pseudo.soft[np.flatnonzero(labeled_mask), labeled_targets] = 1.0
            pseudo.hard[labeled_mask] = labeled_targets
            pseudo.confidence[labeled_mask] = 1.0

            pseudo.loss = per_sample_loss(p, pseudo, cfg.rot.prob_floor)
            fcfg = FilterConfig(
                rho=cfg.filter.rho, tau_g=cfg.filter.tau_g, class_prior=plan.beta
            )
            dr = distribution_aware_select(pseudo, fcfg)
            qr = quality_aware_select(pseudo, fcfg)
            pseudo = clean_union(dr, qr, pseudo)
            pseudo.clean[labeled_mask] = True

            for _ in range(cfg.train.epochs):
                head, breakdown = train_epoch(
                    head, bundle, pseudo, cfg.train, epoch=epoch_counter, opt_state=opt_state
                )
                epoch_counter += 1
        except Exception:
            record.failed_round = rnd
            record.stage_seconds[f"round_{rnd}"] = time.perf_counter() - t0
            raise

        record.clean_counts.append(int(pseudo.clean.sum()))
        record.betas.append([float(b) for b in plan.beta])
        record.loss_totals.append(float(breakdown.l_total))
        record.stage_seconds[f"round_{rnd}"] = time.perf_counter() - t0

        if cfg.eval_each_round or rnd == cfg.rounds - 1:
            record.metrics.append(_evaluate_test(head, bundle, k, cfg.seed, chash))

        if prev_clean is not None:
            changed = int(np.logical_xor(prev_clean, pseudo.clean).sum())
            if changed < cfg.clean_stop_frac * len(train_rows):
                break
        prev_clean = pseudo.clean.copy()

    if not record.metrics:
        record.metrics.append(_evaluate_test(head, bundle, k, cfg.seed, chash))
    if cfg.out_dir is not None:
        head_dir = Path(cfg.out_dir) / "head"
        save_head(head, head_dir)
        record.head_path = str(head_dir)
    return record


def run_baseline_kmeans(bundle: DatasetBundle, k: int | None = None, seed: int = 0,
                        head: HeadParameters | None = None) -> MetricsReport:
    """k-means on the TEST rows' raw embeddings (or projections when a head is given)."""
    test = bundle.test_idx
    x = bundle.embeddings[test].astype(np.float64)
    if head is not None:
        x, _ = forward(head, x)
    k = k if k is not None else bundle.num_classes
    result = kmeans(x, k, seed=seed)
    y_true = bundle.hidden_labels(test)
    return evaluate_predictions(
        y_true, result.assignment, groups=_known_groups(bundle, bundle.num_classes),
        k=bundle.num_classes, seed=seed, config_hash="kmeans-baseline",
    )


SWEEP_AXES = ("omega", "lambda2", "gamma", "known_ratio")


def sweep(bundle: DatasetBundle, cfg: PipelineConfig, axis: str, values,
          longtail: LongTailSpec | None = None) -> list[RunRecord]:
    """One full run per value with a shared seed.

    ``omega`` and ``lambda2`` reuse the bundle; ``gamma`` and ``known_ratio``
    treat it as a balanced labeled source and resample a split per value.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    records = []
    for value in values:
        run_cfg = _clone_config(cfg)
        run_bundle = bundle
        if axis == "omega":
            run_cfg.train.omega = float(value)
        elif axis == "lambda2":
            run_cfg.rot.lambda2 = float(value)
        else:
            if longtail is None:
                raise ValueError(f"axis {axis!r} needs a LongTailSpec to resample from")
            spec_kwargs = asdict(longtail)
            spec_kwargs[axis] = float(value)
            run_bundle = sample_longtail(bundle, LongTailSpec(**spec_kwargs))
        records.append(run_pipeline(run_bundle, run_cfg))
    return records


def _clone_config(cfg: PipelineConfig) -> PipelineConfig:
    return _config_from_flat(_config_to_flat(cfg))


# ---------------------------------------------------------------------------
# flat JSON configuration surface

CONFIG_SCHEMA: dict[str, type] = {
    "rot.lambda1": float,
    "rot.lambda2": float,
    "rot.outer_iters": int,
    "rot.sinkhorn_iters": int,
    "rot.marginal_tol": float,
    "rot.variant": str,
    "rot.mot_momentum": float,
    "rot.prob_floor": float,
    "rot.beta_stop": float,
    "filter.rho": float,
    "filter.tau_g": float,
    "train.tau": float,
    "train.omega": float,
    "train.learning_rate": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.aug_sigma": float,
    "train.seed": int,
    "train.weight_decay": float,
    "train.clip_norm": float,
    "train.d_hidden": int,
    "train.d_proj": int,
    "train.optimizer": str,
    "rounds": int,
    "warmup_epochs": int,
    "eval_each_round": bool,
    "seed": int,
    "clean_stop_frac": float,
}


class ConfigError(ValueError):
    pass


def _config_to_flat(cfg: PipelineConfig) -> dict:
    out = {}
    for key in CONFIG_SCHEMA:
        if "." in key:
            section, name = key.split(".", 1)
            out[key] = getattr(getattr(cfg, section), name)
        else:
            out[key] = getattr(cfg, key)
    return out


def _config_from_flat(flat: dict) -> PipelineConfig:
    unknown = set(flat) - set(CONFIG_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = {**_config_to_flat(PipelineConfig()), **flat}
    for key, value in merged.items():
        want = CONFIG_SCHEMA[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            merged[key] = float(value)
        elif not isinstance(value, want) or (want is not bool and isinstance(value, bool)):
            raise ConfigError(f"config key {key!r} expects {want.__name__}, got {value!r}")

    def section(prefix, cls):
        fields = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith(prefix + ".")}
        try:
            return cls(**fields)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    try:
        return PipelineConfig(
            rot=section("rot", RotConfig),
            filter=section("filter", FilterConfig),
            train=section("train", TrainConfig),
            rounds=merged["rounds"],
            warmup_epochs=merged["warmup_epochs"],
            eval_each_round=merged["eval_each_round"],
            seed=merged["seed"],
            clean_stop_frac=merged["clean_stop_frac"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    try:
        flat = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object of flat keys")
    return _config_from_flat(flat)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(
        json.dumps(_config_to_flat(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# report files

def _record_payload(record: RunRecord) -> dict:
    return {
        "config_hash": record.config_hash,
        "seed": record.seed,
        "rounds_executed": len(record.clean_counts),
        "clean_counts": record.clean_counts,
        "betas": record.betas,
        "loss_totals": record.loss_totals,
        "head_path": record.head_path,
        "failed_round": record.failed_round,
        "metrics": [m.to_dict() for m in record.metrics],
        "final": record.final_metrics.to_dict() if record.metrics else None,
    }


def report(records, out_dir, axis_values=None) -> dict[str, str]:
    """Write run JSON, per-round CSV, and a plot-ready TSV; returns the paths.

    Timings are written separately so the report JSON stays byte-stable for
    identical runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if not records:
        raise ValueError("nothing to report")

    payload = [_record_payload(r) for r in records]
    report_path = out / "report.json"
    report_path.write_text(
        json.dumps(payload[0] if len(payload) == 1 else payload, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )

    timing_path = out / "timings.json"
    timing_path.write_text(
        json.dumps([r.stage_seconds for r in records], sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )

    csv_path = out / "rounds.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "round", "nmi", "ari", "acc", "head", "medium", "tail", "clean"])
        for ri, rec in enumerate(records):
            for mi, m in enumerate(rec.metrics):
                clean = rec.clean_counts[mi] if mi < len(rec.clean_counts) else ""
                writer.writerow([
                    ri, mi, f"{m.nmi:.6f}", f"{m.ari:.6f}", f"{m.acc:.6f}",
                    f"{m.group_acc['head']:.6f}", f"{m.group_acc['medium']:.6f}",
                    f"{m.group_acc['tail']:.6f}", clean,
                ])

    tsv_path = out / "curves.tsv"
    with tsv_path.open("w", encoding="utf-8") as fh:
        fh.write("x\tmetric\ty\n")
        for ri, rec in enumerate(records):
            x = axis_values[ri] if axis_values is not None else ri
            final = rec.final_metrics
            for name, value in (("nmi", final.nmi), ("ari", final.ari), ("acc", final.acc)):
                fh.write(f"{x}\t{name}\t{value:.6f}\n")

    return {
        "report": str(report_path),
        "rounds": str(csv_path),
        "curves": str(tsv_path),
        "timings": str(timing_path),
    }
