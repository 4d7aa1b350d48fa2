"""End-to-end pipeline on a tiny synthetic cohort (a few seconds per run)."""

import dataclasses
import json
import os
from pathlib import Path

import numpy as np
import pytest

from cdssl import cli
from cdssl.config import config_from_dict, save_config
from cdssl.pipeline import Pipeline, PipelineError, compare_runs, emit_report, run_pipeline
from cdssl.regress import predictions_csv

SPACING = [4.0, 4.0, 4.0]
STAGE = {"epochs": 1, "batch_size": 8, "projection_dim": 8, "hidden_dim": 8}


def tiny_raw(stages=True):
    return {
        "seed": 0,
        "data": {
            "seed": 5,
            "phantom": {"shape": [24, 24, 16]},
            "generic": {"images": 24},
            "studies": [
                {"name": "HABS", "subjects": 12, "roles": ["ssl"], "spacing_mm": SPACING},
                {"name": "ADNI", "subjects": 14, "roles": ["finetune", "in_study_test"], "spacing_mm": SPACING},
                {"name": "OASIS", "subjects": 14, "roles": ["finetune", "in_study_test"], "spacing_mm": SPACING,
                 "orientations": ["LPS"]},
                {"name": "ABBY", "subjects": 6, "roles": ["out_study_test"], "label_offset": 0.5,
                 "spacing_mm": SPACING},
            ],
        },
        "model": {"width": 4, "depth": 2, "input_pool": 8},
        "ssl": {"stages": [
            {"dataset": "generic", "method": "barlow_twins", **STAGE},
            {"dataset": "indomain", "method": "simclr", **STAGE},
        ] if stages else []},
        "finetune": {"epochs": 2, "batch_size": 8},
        "saliency": {"images": 2},
    }


def tiny(**over):
    raw = tiny_raw()
    for k, v in over.items():
        raw[k] = v
    return config_from_dict(raw)


REPORT_FILES = ("metrics.json", "summary.txt", "residuals.csv", "predictions_val.csv", "predictions_in_study.csv")


@pytest.fixture(scope="module")
def shared(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = tiny()
    a = run_pipeline(cfg, root / "a")
    b = run_pipeline(cfg, root / "b")
    return cfg, a, b


def test_reports_byte_identical_across_runs(shared):
    _, a, b = shared
    for name in REPORT_FILES:
        assert (a / "reports" / name).read_bytes() == (b / "reports" / name).read_bytes(), name
    for k in range(3):
        assert (a / "models" / f"fold{k}.ckpt").read_bytes() == (b / "models" / f"fold{k}.ckpt").read_bytes()


def test_report_structure(shared):
    _, a, _ = shared
    doc = json.loads((a / "reports" / "metrics.json").read_text())
    assert len(doc["validation"]["per_fold"]) == 3
    assert doc["init_scheme"] == "ssl_checkpoint"
    assert doc["provenance"][0].startswith("generic") and doc["provenance"][1].startswith("indomain")
    assert doc["provenance"][-1] == "finetune"
    assert set(doc["tests"]) == {"in_study", "out_ABBY"}
    for t in doc["tests"].values():
        assert len(t["per_fold_models"]["per_fold"]) == 3
        assert set(t["fold_mean_prediction"]) >= {"r2", "r", "mse"}
    assert doc["notes"]
    assert len(list((a / "saliency").glob("*.png"))) == 2
    assert len(list((a / "saliency").glob("*.heat"))) == 2


def test_resume_skips_completed_steps(shared, tmp_path):
    cfg, a, _ = shared
    mtimes = {p: p.stat().st_mtime_ns for p in (a / "models").glob("*.ckpt")}
    mtimes.update({p: p.stat().st_mtime_ns for p in (a / "checkpoints").glob("*.ckpt")})
    Pipeline(cfg, a, resume=True).run()
    for p, t in mtimes.items():
        assert p.stat().st_mtime_ns == t, p.name


def test_resume_reruns_only_changed_downstream(shared, tmp_path):
    cfg, a, _ = shared
    run = tmp_path / "r"
    run_pipeline(cfg, run)
    stage_t = {p: p.stat().st_mtime_ns for p in (run / "checkpoints").glob("*.ckpt")}
    fold_t = {p: p.stat().st_mtime_ns for p in (run / "models").glob("*.ckpt")}
    changed = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, epochs=1))
    Pipeline(changed, run, resume=True).run()
    assert all(p.stat().st_mtime_ns == t for p, t in stage_t.items())
    assert all(p.stat().st_mtime_ns != t for p, t in fold_t.items())


def test_stale_upstream_refused(shared, tmp_path):
    cfg, a, _ = shared
    changed = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, learning_rate=5e-3))
    with pytest.raises(PipelineError, match="different configuration") as err:
        Pipeline(changed, a, data_dir=a / "data").evaluate()
    assert err.value.stage == "evaluate"


def test_slicing_mode_shares_prepared_data(shared):
    cfg, a, _ = shared
    center = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, ssl_slicing="center"))
    p, q = Pipeline(cfg, a), Pipeline(center, a)
    assert p.data_hash == q.data_hash
    assert p.stage_hashes()[1] != q.stage_hashes()[1]
    assert p.finetune_hash(0) != q.finetune_hash(0)


def test_missing_upstream_refused(tmp_path):
    with pytest.raises(PipelineError, match="finetune"):
        Pipeline(tiny(), tmp_path / "x").finetune()


def test_random_baseline_has_no_pretraining(shared, tmp_path):
    cfg, a, _ = shared
    raw = tiny_raw(stages=False)
    run = run_pipeline(config_from_dict(raw), tmp_path / "rand", data_dir=a / "data")
    doc = json.loads((run / "reports" / "metrics.json").read_text())
    assert doc["init_scheme"] == "random"
    assert doc["provenance"] == ["random-init", "finetune"]
    assert not list((run / "checkpoints").glob("*.ckpt"))


def test_compare_with_self(shared):
    _, a, b = shared
    res = compare_runs(a, b, "in_study")
    assert res.z == 0.0 and res.p_two_tailed == 1.0


# ---------------------------------------------------------------------------
# report emission on hand-made predictions


def _fake_run(root: Path, rows_by_file: dict, folds=2, test_sets=("in_study",)):
    rep = root / "reports"
    rep.mkdir(parents=True)
    (rep / "run_info.json").write_text(json.dumps({
        "config_hash": "0" * 64, "seed": 0, "folds": folds, "test_sets": list(test_sets),
        "provenance": [], "init_scheme": "random", "residual_bins": 5,
    }))
    for name, rows in rows_by_file.items():
        (rep / name).write_text(predictions_csv(rows))
    return root


def test_negative_r2_keeps_sign(tmp_path):
    y = [0.0, 1.0, 2.0, 3.0]
    bad = [(f"s{i}", yi, 3.0 - yi) for i, yi in enumerate(y)]
    files = {"predictions_val_fold0.csv": bad, "predictions_val_fold1.csv": bad,
             "predictions_in_study.csv": bad, "predictions_in_study_fold0.csv": bad,
             "predictions_in_study_fold1.csv": bad}
    doc = emit_report(_fake_run(tmp_path / "neg", files))
    assert doc["validation"]["mean"]["r2"] == pytest.approx(-3.0)
    assert "-3.00 " in (tmp_path / "neg" / "reports" / "summary.txt").read_text()


def test_emit_report_names_missing_files(tmp_path):
    rows = [("s0", 1.0, 1.0), ("s1", 2.0, 2.5)]
    root = _fake_run(tmp_path / "inc", {"predictions_val_fold0.csv": rows})
    with pytest.raises(PipelineError, match="predictions_val_fold1.csv"):
        emit_report(root)
    with pytest.raises(PipelineError, match="run_info.json"):
        emit_report(tmp_path / "nothing")


def _pred_run(root: Path, ids, y, pred):
    rep = root / "reports"
    rep.mkdir(parents=True)
    (rep / "predictions_in_study.csv").write_text(predictions_csv(list(zip(ids, y, pred))))
    return root


def test_compare_detects_planted_difference(tmp_path):
    rng = np.random.default_rng(0)
    n = 200
    y = rng.normal(size=n)
    ids = [f"s{i:03d}" for i in range(n)]
    good = y + 0.3 * rng.normal(size=n)
    poor = y + 1.5 * rng.normal(size=n)
    res = compare_runs(_pred_run(tmp_path / "g", ids, y, good), _pred_run(tmp_path / "p", ids, y, poor))
    assert res.r12 > res.r13
    assert res.p_two_tailed < 0.05


def test_compare_rejects_different_subjects(tmp_path):
    a = _pred_run(tmp_path / "a", ["s1", "s2", "s3"], [1.0, 2.0, 3.0], [1.0, 2.0, 2.0])
    b = _pred_run(tmp_path / "b", ["s1", "s2", "s4"], [1.0, 2.0, 3.0], [1.0, 2.0, 2.0])
    with pytest.raises(PipelineError, match=r"s3.*s4|s4.*s3"):
        compare_runs(a, b)


# ---------------------------------------------------------------------------
# command line


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("finetune: {lr: 1}\n")
    assert cli.main(["prepare", "--config", str(bad)]) == 2
    assert "error: config" in capsys.readouterr().err


def test_cli_stage_error_exit_code(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    save_config(tiny(), path)
    assert cli.main(["finetune", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "error: finetune:" in capsys.readouterr().err


def test_cli_env_out_and_seed_override(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    save_config(tiny(), path)
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "envout"))
    args = cli.build_parser().parse_args(["prepare", "--config", str(path), "--seed", "7"])
    cfg = cli.resolve_config(args)
    assert cfg.output_dir == str(tmp_path / "envout") and cfg.seed == 7
    args = cli.build_parser().parse_args(["prepare", "--config", str(path), "--out", str(tmp_path / "flag")])
    assert cli.resolve_config(args).output_dir == str(tmp_path / "flag")


def test_cli_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv(cli.ENV_THREADS, "many")
    assert cli.main(["prepare"]) == 2
    monkeypatch.delenv(cli.ENV_THREADS)


def test_cli_compare_prints_json(shared, capsys):
    _, a, b = shared
    assert cli.main(["compare", str(a), str(b), "--test-set", "val"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["z"] == 0.0
    assert cli.main(["compare", str(a), os.devnull]) == 1
