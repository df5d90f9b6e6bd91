import json

import numpy as np
import pytest

from otcluster.bundle import save_bundle, load_bundle
from otcluster.cli import main, EXIT_CONFIG, EXIT_DATA, EXIT_OK
from otcluster.longtail import LongTailSpec, sample_longtail

from conftest import balanced_source


@pytest.fixture
def source_dir(tmp_path):
    path = tmp_path / "source"
    save_bundle(balanced_source(k=5, per_class=30, dim=6, seed=0, sep=8.0), path)
    return path


@pytest.fixture
def run_bundle_dir(tmp_path):
    source = balanced_source(k=5, per_class=30, dim=6, seed=0, sep=8.0)
    bundle = sample_longtail(source, LongTailSpec(gamma=4.0, seed=0, test_per_class=5))
    path = tmp_path / "bundle"
    save_bundle(bundle, path)
    return path


def fast_config(tmp_path):
    cfg = {
        "rot.outer_iters": 3,
        "rot.sinkhorn_iters": 100,
        "train.epochs": 1,
        "train.batch_size": 32,
        "train.d_hidden": 8,
        "train.d_proj": 4,
        "rounds": 1,
        "warmup_epochs": 2,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_sample_longtail_command(source_dir, tmp_path):
    out = tmp_path / "sampled"
    code = main([
        "sample-longtail", "--source", str(source_dir), "--out", str(out),
        "--gamma", "4", "--seed", "3", "--test-per-class", "5",
    ])
    assert code == EXIT_OK
    bundle = load_bundle(out)
    assert len(bundle.test_idx) == 25


def test_solve_rot_command(tmp_path):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=20).astype(np.float64)
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    (pred_dir / "matrix.json").write_text(json.dumps({"n": 20, "dim": 4}))
    p.astype("<f4").tofile(pred_dir / "matrix.bin")
    out = tmp_path / "solved"
    code = main(["solve-rot", "--predictions", str(pred_dir), "--out", str(out)])
    assert code == EXIT_OK
    trace = json.loads((out / "trace.json").read_text())
    assert trace["objective"]
    meta = json.loads((out / "plan" / "matrix.json").read_text())
    assert meta == {"n": 20, "dim": 4}


def test_run_command_writes_reports(run_bundle_dir, tmp_path):
    out = tmp_path / "out"
    code = main([
        "run", "--bundle", str(run_bundle_dir), "--out", str(out),
        "--config", str(fast_config(tmp_path)), "--baseline",
    ])
    assert code == EXIT_OK
    payload = json.loads((out / "report.json").read_text())
    assert payload["final"]["acc"] >= 0.0
    assert (out / "baseline.json").exists()
    assert (out / "rounds.csv").exists()


def test_evaluate_command_with_head(run_bundle_dir, tmp_path):
    out = tmp_path / "out"
    main(["run", "--bundle", str(run_bundle_dir), "--out", str(out),
          "--config", str(fast_config(tmp_path))])
    report_path = tmp_path / "eval.json"
    code = main([
        "evaluate", "--bundle", str(run_bundle_dir), "--head", str(out / "head"),
        "--out", str(report_path),
    ])
    assert code == EXIT_OK
    rep = json.loads(report_path.read_text())
    assert set(rep) >= {"nmi", "ari", "acc", "group_acc", "per_class_acc"}


def test_estimate_k_command(run_bundle_dir, capsys):
    code = main(["estimate-k", "--bundle", str(run_bundle_dir),
                 "--k-prime", "8", "--threshold", "1"])
    assert code == EXIT_OK
    printed = capsys.readouterr().out.strip()
    assert printed.isdigit()


def test_unknown_config_key_exits_2(run_bundle_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    code = main(["run", "--bundle", str(run_bundle_dir), "--out",
                 str(tmp_path / "o"), "--config", str(bad)])
    assert code == EXIT_CONFIG


def test_missing_bundle_exits_3(tmp_path):
    code = main(["run", "--bundle", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_corrupt_bundle_exits_3(run_bundle_dir, tmp_path):
    blob = (run_bundle_dir / "embeddings.bin").read_bytes()
    (run_bundle_dir / "embeddings.bin").write_bytes(blob[:-8])
    code = main(["run", "--bundle", str(run_bundle_dir), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_sweep_command(run_bundle_dir, tmp_path):
    out = tmp_path / "sweepout"
    code = main([
        "sweep", "--bundle", str(run_bundle_dir), "--axis", "omega",
        "--values", "0.0,1.0", "--out", str(out), "--config", str(fast_config(tmp_path)),
    ])
    assert code == EXIT_OK
    rows = (out / "curves.tsv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 3
