import csv
import json

import pytest

from vifiassoc.cli import main

SMALL = {"duration_s": 40, "n_sequences": 3, "test_fraction": 0.34, "epochs": 2, "batch_size": 8}


def run_pipeline(root, cfg=SMALL, seed=3):
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "c.json"
    conf.write_text(json.dumps(cfg))
    c = ["--config", str(conf), "--seed", str(seed)]
    assert main(["simulate", *c, "--out", str(root / "traces")]) == 0
    assert main(["build-dataset", *c, "--traces", str(root / "traces"), "--out", str(root / "ds")]) == 0
    assert main(["train", *c, "--manifest", str(root / "ds/train.jsonl"), "--out", str(root / "m.ckpt")]) == 0
    ev = ["eval", *c, "--ckpt", str(root / "m.ckpt")]
    assert main([*ev, "--manifest", str(root / "ds/test.jsonl"), "--out", str(root / "pre")]) == 0
    fixed = ["--margin-mode", "FixedFromTrain", "--train-manifest", str(root / "ds/train.jsonl")]
    assert main([*ev, "--task", "downstream", *fixed, "--traces", str(root / "traces"), "--out", str(root / "down")]) == 0
    return root


def test_pipeline_outputs_and_determinism(tmp_path, capsys):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    capsys.readouterr()
    for rel in ("pre/metrics.csv", "down/metrics.csv", "pre/latent.csv", "down/assignments.csv", "m.ckpt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    rows = list(csv.reader((a / "pre/metrics.csv").open()))
    assert rows[0][:3] == ["task", "k", "margin_mode"]
    assert rows[1][:3] == ["pretext", "25", "VariableOnTest"]
    down = list(csv.reader((a / "down/metrics.csv").open()))
    assert down[1][:3] == ["downstream", "25", "FixedFromTrain"]
    assert (a / "m_loss.csv").read_text().startswith("epoch,loss\n")
    assert sorted(p.name for p in (a / "traces").iterdir())[:2] == ["seq000.csv", "seq000_assoc.csv"]


def test_k_flag_overrides_config(tmp_path, capsys):
    run = run_pipeline(tmp_path / "a")
    c = ["--config", str(run / "c.json"), "--seed", "3"]
    assert main(["build-dataset", *c, "--k", "10", "--traces", str(run / "traces"), "--out", str(tmp_path / "k10")]) == 0
    rec = json.loads((tmp_path / "k10/train.jsonl").read_text().splitlines()[0])
    assert rec["vision_pgm"].startswith("images/")
    # geometry mismatch between the k=25 checkpoint and k=10 pairs is a data error
    code = main(["eval", *c, "--ckpt", str(run / "m.ckpt"), "--manifest", str(tmp_path / "k10/test.jsonl"), "--out", str(tmp_path / "e")])
    assert code == 3
    assert "retrain" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]


@pytest.mark.parametrize(
    "cfg, code",
    [({"bogus": 1}, 2), ({"duration_s": -1}, 2), ({"lr": -0.1}, 2), ({"ftm_rate_hz": 20}, 2)],
)
def test_bad_configs_exit_2(tmp_path, capsys, cfg, code):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(conf), "--seed", "0", "--out", str(tmp_path / "o")]) == code
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert json.loads(err)["error"] == "config"


def test_missing_seed_and_files(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--seed", "1", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--seed", "1", "--out", str(tmp_path)]) == 2


def test_data_errors_exit_3(tmp_path, capsys):
    (tmp_path / "traces").mkdir()
    (tmp_path / "traces/s.csv").write_text("timestamp_ms,entity_id,modality,value_m\n0,a,depth,oops\n")
    code = main(["build-dataset", "--seed", "1", "--traces", str(tmp_path / "traces"), "--out", str(tmp_path / "d")])
    assert code == 3
    assert "line 2" in json.loads(capsys.readouterr().err)["message"]
    (tmp_path / "empty").mkdir()
    assert main(["build-dataset", "--seed", "1", "--traces", str(tmp_path / "empty"), "--out", str(tmp_path / "d")]) == 3


def test_case_study_rows(tmp_path, capsys):
    cfg = {"duration_s": 40, "n_train": 2, "n_test": 1, "epochs": 1, "ks": [10, 25]}
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(cfg))
    assert main(["case-study", "margin", "--config", str(conf), "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "case_study_margin.csv").open()))
    got = {(r["task"], r["k"], r["margin_mode"]) for r in rows}
    assert got == {
        (t, k, m) for t in ("pretext", "downstream") for k in ("10", "25") for m in ("FixedFromTrain", "VariableOnTest")
    }
    cfg["ks"] = [10]
    conf.write_text(json.dumps(cfg))
    assert main(["case-study", "detector", "--config", str(conf), "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "case_study_detector.csv").open()))
    assert {r["variant"] for r in rows} == {"ground_truth", "corrected", "off_the_shelf"}
