import json

import pandas as pd
import pytest

from replaygan.cli import main


def _run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "train.yaml"
    cfg.write_text("curriculum: [10]\nbuffer_capacity: 100\n")
    _run("simulate", "--n-patients", 30, "--seed", 3, "--out", d / "sim")
    _run("train", "--data", d / "sim/cohort.csv", "--variant", "ours_bilstm", "--epochs", 1,
         "--batch-size", 16, "--config", cfg, "--out", d / "train")
    _run("generate", "--checkpoint", d / "train/checkpoint.pt", "--n-patients", 20, "--months", 20,
         "--seed", 1, "--out", d / "gen")
    return d


def test_outputs_and_manifest(pipeline):
    for sub, files in {"sim": ["cohort.csv"], "train": ["checkpoint.pt", "trace.csv", "summary.json"],
                       "gen": ["synthetic.csv"]}.items():
        man = json.loads((pipeline / sub / "manifest.json").read_text())
        for f in files:
            assert f in man["outputs"]
        assert man["config_hash"]
    syn = pd.read_csv(pipeline / "gen/synthetic.csv")
    assert syn.groupby(syn.columns[0]).size().eq(20).all()


def test_rerun_is_byte_identical(pipeline, tmp_path):
    for sub in ("sim", "train", "gen"):
        _run("rerun", pipeline / sub / "manifest.json", "--out", tmp_path / sub)
        for name in ("cohort.csv", "trace.csv", "synthetic.csv"):
            a = pipeline / sub / name
            if a.exists():
                assert a.read_bytes() == (tmp_path / sub / name).read_bytes()


def test_evaluate_privacy_utility_report(pipeline):
    d = pipeline
    _run("evaluate", "--real", d / "sim/cohort.csv", "--syn", d / "gen/synthetic.csv", "--repeats", 2,
         "--sample-n", 500, "--iters", 5, "--no-plots", "--out", d / "eval")
    _run("privacy", "--real", d / "sim/cohort.csv", "--syn", d / "gen/synthetic.csv", "--out", d / "priv")
    risk = json.loads((d / "priv/risk.json").read_text())
    assert risk["threshold"] == 0.09 and 0 <= risk["risk"] <= 1
    _run("report", d / "eval", d / "priv", "--out", d / "rep")
    assert (d / "rep/report.md").read_text().strip()


def test_errors_are_json(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "train" and "error" in err
    assert not (tmp_path / "o").exists()
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2


def test_rerun_rejects_changed_input(pipeline, tmp_path):
    import shutil
    src = tmp_path / "cohort.csv"
    shutil.copy(pipeline / "sim/cohort.csv", src)
    _run("privacy", "--real", src, "--syn", pipeline / "gen/synthetic.csv", "--out", tmp_path / "p")
    src.write_text(src.read_text() + "\n")
    assert main(["rerun", str(tmp_path / "p/manifest.json"), "--out", str(tmp_path / "p2")]) == 1
