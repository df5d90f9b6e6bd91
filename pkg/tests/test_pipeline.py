import json

import numpy as np
import pytest

from otcluster.bundle import DatasetBundle, UNLABELED
from otcluster.learner import TrainConfig
from otcluster.noise import FilterConfig
from otcluster.pipeline import (
    ConfigError,
    PipelineConfig,
    load_config,
    report,
    run_baseline_kmeans,
    run_pipeline,
    save_config,
    sweep,
    _config_from_flat,
    _config_to_flat,
)
from otcluster.rot import RotConfig

from conftest import balanced_source, toy_bundle
from otcluster.longtail import LongTailSpec, sample_longtail


def quick_config(**overrides):
    base = dict(
        rot=RotConfig(outer_iters=4, sinkhorn_iters=100),
        filter=FilterConfig(),
        train=TrainConfig(epochs=2, batch_size=32, d_hidden=8, d_proj=4,
                          learning_rate=0.05),
        rounds=2,
        warmup_epochs=4,
        seed=0,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def small_run_bundle(seed=0):
    source = balanced_source(k=5, per_class=30, dim=6, seed=seed, sep=8.0)
    return sample_longtail(source, LongTailSpec(gamma=4.0, seed=seed, test_per_class=5))


def test_run_pipeline_smoke_and_record_shape():
    bundle = small_run_bundle()
    record = run_pipeline(bundle, quick_config())
    rounds = len(record.clean_counts)
    assert 1 <= rounds <= 2
    assert len(record.betas) == rounds
    assert len(record.metrics) == rounds
    assert 0.0 <= record.final_metrics.acc <= 1.0
    for beta in record.betas:
        assert abs(sum(beta) - 1.0) <= 1e-9


def test_run_pipeline_deterministic():
    bundle = small_run_bundle()
    a = run_pipeline(bundle, quick_config())
    b = run_pipeline(bundle, quick_config())
    assert a.final_metrics.to_dict() == b.final_metrics.to_dict()
    assert a.clean_counts == b.clean_counts
    assert a.betas == b.betas


def test_run_pipeline_collapse_configuration():
    # tau_g = 0 marks everything clean; omega = 0 trains with plain
    # cross-entropy on those pseudo-labels
    bundle = small_run_bundle()
    cfg = quick_config(rounds=1,
                       filter=FilterConfig(rho=1.0, tau_g=0.0),
                       train=TrainConfig(epochs=1, batch_size=32, omega=0.0,
                                         d_hidden=8, d_proj=4))
    record = run_pipeline(bundle, cfg)
    n_train = len(bundle.train_idx)
    assert record.clean_counts == [n_train]


def test_label_hygiene_poisoning_unlabeled_rows():
    bundle = small_run_bundle()
    labels = bundle.labels.copy()
    poisoned_rows = bundle.unlabeled_idx
    labels[poisoned_rows] = (labels[poisoned_rows] + 1) % bundle.num_classes
    poisoned = DatasetBundle(
        embeddings=bundle.embeddings.copy(),
        labels=labels,
        split=bundle.split.copy(),
        known_classes=bundle.known_classes,
    )
    cfg = quick_config(eval_each_round=False)
    a = run_pipeline(bundle, cfg)
    b = run_pipeline(poisoned, cfg)
    # training never reads hidden labels: trajectories agree exactly;
    # evaluation differs only through the head/medium/tail group splits
    assert a.clean_counts == b.clean_counts
    assert a.betas == b.betas
    assert a.loss_totals == b.loss_totals
    assert a.final_metrics.acc == b.final_metrics.acc


def test_baseline_kmeans_separable():
    bundle = small_run_bundle()
    rep = run_baseline_kmeans(bundle, seed=0)
    assert 0.0 <= rep.acc <= 1.0
    again = run_baseline_kmeans(bundle, seed=0)
    assert rep.to_dict() == again.to_dict()
    assert set(rep.to_dict()) == {
        "nmi", "ari", "acc", "group_acc", "per_class_acc", "n", "k", "seed", "config_hash",
    }


def test_report_files_and_determinism(tmp_path):
    bundle = small_run_bundle()
    record = run_pipeline(bundle, quick_config())
    paths = report([record], tmp_path / "a")
    assert set(paths) == {"report", "rounds", "curves", "timings"}
    blob_a = (tmp_path / "a" / "report.json").read_bytes()
    record2 = run_pipeline(bundle, quick_config())
    report([record2], tmp_path / "b")
    assert blob_a == (tmp_path / "b" / "report.json").read_bytes()
    rounds = (tmp_path / "a" / "rounds.csv").read_text().strip().splitlines()
    assert rounds[0].startswith("run,round,nmi")
    assert len(rounds) == 1 + len(record.metrics)


def test_sweep_omega(tmp_path):
    bundle = small_run_bundle()
    records = sweep(bundle, quick_config(rounds=1), "omega", [0.0, 0.5, 1.0])
    assert len(records) == 3
    # omega = 0 gives zero class-contrast contribution in the logged losses
    report(records, tmp_path, axis_values=[0.0, 0.5, 1.0])
    curves = (tmp_path / "curves.tsv").read_text().strip().splitlines()
    assert len(curves) == 1 + 3 * 3  # header + 3 metrics x 3 runs


def test_sweep_known_ratio_resamples():
    source = balanced_source(k=8, per_class=40, dim=5, seed=1, sep=8.0)
    spec = LongTailSpec(gamma=3.0, seed=2, test_per_class=4)
    records = sweep(source, quick_config(rounds=1), "known_ratio", [0.5, 0.75],
                    longtail=spec)
    assert len(records) == 2


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ValueError):
        sweep(toy_bundle(), quick_config(), "tau", [0.1])


def test_config_round_trip(tmp_path):
    cfg = quick_config()
    save_config(cfg, tmp_path / "cfg.json")
    loaded = load_config(tmp_path / "cfg.json")
    assert _config_to_flat(loaded) == _config_to_flat(cfg)


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"rot.lambda3": 1.0}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "cfg.json")


def test_config_rejects_bad_types():
    with pytest.raises(ConfigError):
        _config_from_flat({"rounds": "five"})
    with pytest.raises(ConfigError):
        _config_from_flat({"rot.lambda1": -0.5})


def test_config_hash_stable_and_sensitive():
    a = quick_config()
    b = quick_config()
    assert a.config_hash() == b.config_hash()
    c = quick_config(seed=99)
    assert a.config_hash() != c.config_hash()
