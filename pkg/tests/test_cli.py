import csv
import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from breathstage import nn
from breathstage.cli import main
from breathstage.apnea import ApneaModel
from breathstage.signal_io import read_manifest, read_stage_labels
from breathstage.staging import Hypnogram, StagingModel, StagingModelConfig


def _digest(folder: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"n_subjects": 5, "night_hours": 1.0, "seed": 11}))
    assert main(["synth", str(spec), str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(cohort):
    out = cohort / "train"
    argv = ["train", "--manifest", str(cohort / "data" / "manifest.csv"), "--out", str(out),
            "--epochs", "1", "--crop-epochs", "20", "--folds", "4"]
    assert main(argv) == 0
    return out


def test_synth_is_deterministic(cohort, tmp_path):
    assert main(["synth", str(cohort / "spec.json"), str(tmp_path / "again")]) == 0
    assert _digest(tmp_path / "again") == _digest(cohort / "data")


def test_synth_seed_flag_changes_output(cohort, tmp_path):
    assert main(["synth", str(cohort / "spec.json"), str(tmp_path / "s"), "--seed", "12"]) == 0
    assert _digest(tmp_path / "s") != _digest(cohort / "data")


def test_bad_spec_names_field(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"n_subjects": 3, "female_prob": 1.5}))
    assert main(["synth", str(spec), str(tmp_path / "o")]) == 1
    assert "female_prob" in capsys.readouterr().err


def test_missing_spec_is_io_error(tmp_path):
    assert main(["synth", str(tmp_path / "nope.json"), str(tmp_path / "o")]) == 2


def test_unknown_flag_exits_validation(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stage", "--bogus"])
    assert exc.value.code == 1


def test_stage_rows_match_epochs(cohort, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    StagingModel.create(StagingModelConfig.toy(), seed=0).save(ckpt)
    manifest = cohort / "data" / "manifest.csv"
    assert main(["stage", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(tmp_path / "h")]) == 0
    for e in read_manifest(manifest):
        lines = (tmp_path / "h" / f"{e.record_id}.hypnogram.csv").read_text().splitlines()
        assert len(lines) - 1 == read_stage_labels(e.stages).size == 120


def test_stage_missing_checkpoint(cohort, tmp_path):
    manifest = cohort / "data" / "manifest.csv"
    rc = main(["stage", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(manifest), "--out", str(tmp_path)])
    assert rc == 2


def test_stage_rejects_short_record(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    StagingModel.create(StagingModelConfig.toy(), seed=0).save(ckpt)
    rec = tmp_path / "short.csv"
    rec.write_text("time_s,value\n" + "".join(f"{i / 10},{np.sin(i / 7):.6f}\n" for i in range(600)))
    (tmp_path / "short.json").write_text(json.dumps({"subject_id": "x", "channel": "Radio", "sample_rate_hz": 10.0}))
    assert main(["stage", "--checkpoint", str(ckpt), str(rec), "--out", str(tmp_path / "o")]) == 1


def test_train_epochs_zero_gives_init(cohort, tmp_path):
    argv = ["train", "--manifest", str(cohort / "data" / "manifest.csv"), "--out", str(tmp_path), "--epochs", "0"]
    assert main(argv) == 0
    for f in range(4):
        init = StagingModel.create(StagingModelConfig.toy(), nn.make_rng([0, f]))
        assert StagingModel.load(tmp_path / f"fold{f}.ckpt").params.checksum() == init.params.checksum()


def test_train_outputs(trained, cohort):
    folds = json.loads((trained / "folds.json").read_text())
    members = sorted(s for f in folds.values() for s in f)
    assert members == sorted({e.subject_id for e in read_manifest(cohort / "data" / "manifest.csv")})
    preds = sorted(p.name for p in (trained / "predictions").glob("*.hypnogram.csv"))
    assert len(preds) == 5
    with open(trained / "run_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    # 5 subjects over 4 folds: three folds train on 4 records, one on 3; batch 2
    assert len(rows) == 2 + 2 + 2 + 2
    assert {int(r["fold"]) for r in rows} == {0, 1, 2, 3}


def test_evaluate_with_truth_as_predictions(cohort, tmp_path):
    manifest = cohort / "data" / "manifest.csv"
    pred = tmp_path / "pred"
    pred.mkdir()
    for e in read_manifest(manifest):
        stages = read_stage_labels(e.stages)
        Hypnogram.from_probs(np.eye(5)[stages]).to_csv(pred / f"{e.record_id}.hypnogram.csv")
    out = tmp_path / "eval"
    assert main(["evaluate", "--pred-dir", str(pred), "--manifest", str(manifest), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pooled_acc4"] == 1.0 and summary["pooled_acc5"] == 1.0
    assert summary["kappa4"] == 1.0 and summary["kappa5"] == 1.0
    for g in summary["gaps"].values():
        assert g["mean"] in (0.0, None)
    for svg in (out / "figures").glob("*.svg"):
        assert ET.parse(svg).getroot().tag.endswith("svg")
    assert main(["report", "--eval-dir", str(out), "--manifest", str(manifest), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.md").read_text().startswith("# Evaluation report")


def test_evaluate_empty_pred_dir(cohort, tmp_path):
    rc = main(["evaluate", "--pred-dir", str(tmp_path), "--manifest", str(cohort / "data" / "manifest.csv"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_crt_writes_checksums(trained, cohort, tmp_path):
    argv = ["crt", "--manifest", str(cohort / "data" / "manifest.csv"), "--checkpoint", str(trained / "fold0.ckpt"),
            "--out", str(tmp_path), "--group", "sex=Female", "--epochs", "1"]
    assert main(argv) == 0
    check = json.loads((tmp_path / "encoder_checksum.json").read_text())
    assert check["unchanged"] and check["before"] == check["after"]


def test_crt_bad_group(trained, cohort, tmp_path):
    argv = ["crt", "--manifest", str(cohort / "data" / "manifest.csv"), "--checkpoint", str(trained / "fold0.ckpt"),
            "--out", str(tmp_path), "--group", "height=tall"]
    assert main(argv) == 1


def test_apnea_tst_source(cohort, tmp_path):
    manifest = cohort / "data" / "manifest.csv"
    a_ckpt, s_ckpt = tmp_path / "ta" / "apnea.ckpt", tmp_path / "s.ckpt"
    assert main(["train", "--model", "apnea", "--steps", "0", "--manifest", str(manifest), "--out", str(tmp_path / "ta")]) == 0
    StagingModel.create(StagingModelConfig.toy(), seed=0).save(s_ckpt)
    base = ["apnea", "--checkpoint", str(a_ckpt), "--manifest", str(manifest), "--threshold", "0.3"]
    assert main(base + ["--out", str(tmp_path / "lab"), "--tst-source", "labels"]) == 0
    assert main(base + ["--out", str(tmp_path / "pred"), "--staging-checkpoint", str(s_ckpt)]) == 0
    lab = (tmp_path / "lab" / "ahi_report.csv").read_text().splitlines()
    pred = (tmp_path / "pred" / "ahi_report.csv").read_text().splitlines()
    assert lab[0] == pred[0] and len(lab) == len(pred) == 6
    assert [r.split(",")[4] for r in lab[1:]] != [r.split(",")[4] for r in pred[1:]]


def test_apnea_pred_needs_staging(cohort, tmp_path):
    ckpt = tmp_path / "a.ckpt"
    ApneaModel.create(seed=0).save(ckpt)
    rc = main(["apnea", "--checkpoint", str(ckpt), "--manifest", str(cohort / "data" / "manifest.csv"), "--out", str(tmp_path)])
    assert rc == 1


def test_env_override(cohort, tmp_path, monkeypatch):
    monkeypatch.setenv("BREATHSTAGE_SEED", "12")
    assert main(["synth", str(cohort / "spec.json"), str(tmp_path / "env")]) == 0
    assert json.loads((tmp_path / "env" / "cohort_spec.json").read_text())["seed"] == 12
    # an explicit flag still wins
    assert main(["synth", str(cohort / "spec.json"), str(tmp_path / "flag"), "--seed", "11"]) == 0
    assert _digest(tmp_path / "flag") == _digest(cohort / "data")


def test_env_bad_value(cohort, tmp_path, monkeypatch):
    monkeypatch.setenv("BREATHSTAGE_SEED", "eleven")
    assert main(["synth", str(cohort / "spec.json"), str(tmp_path / "x")]) == 1
