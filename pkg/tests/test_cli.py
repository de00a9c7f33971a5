import json
import subprocess
import sys

import numpy as np
import pytest

from egcsi.channel import load_dataset
from egcsi.cli import main
from egcsi.harness import default_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Environment file, two datasets and a trained codec, built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-envs", "--count", "2", "--seed", "4", "--prefix", "site", "--out", str(d / "envs.json")]) == 0
    (d / "data").mkdir()
    assert main(["gen-data", "--envs", str(d / "envs.json"), "--samples", "40", "--seed", "1",
                 "--out-dir", str(d / "data")]) == 0
    assert main(["train-codec", "--data", str(d / "data" / "site000.egds"), "--M", "6", "--Q-f", "5",
                 "--out", str(d / "codec.bin")]) == 0
    return d


def test_gen_envs_file(workspace):
    doc = json.loads((workspace / "envs.json").read_text())
    assert doc["version"] == 1
    assert [e["env_id"] for e in doc["environments"]] == ["site000", "site001"]


def test_gen_data_files(workspace):
    ds = load_dataset(workspace / "data" / "site001.egds")
    assert ds.channels.shape == (40, 32, 32) and ds.env_id == "site001" and ds.seed == 1


def test_gen_data_missing_dir(tmp_path, workspace, capsys):
    target = tmp_path / "nope"
    rc = main(["gen-data", "--envs", str(workspace / "envs.json"), "--samples", "5", "--out-dir", str(target)])
    assert rc == 1
    assert "does not exist" in capsys.readouterr().err
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_encode_decode_matches_eval(workspace, tmp_path):
    data = str(workspace / "data" / "site001.egds")
    codec = str(workspace / "codec.bin")
    assert main(["encode", "--data", data, "--codec", codec, "--out", str(tmp_path / "s.egfb")]) == 0
    assert main(["decode", "--stream", str(tmp_path / "s.egfb"), "--codec", codec, "--reference", data,
                 "--out", str(tmp_path / "rec.egds"), "--report", str(tmp_path / "dec.jsonl"),
                 "--summary", str(tmp_path / "dec.json")]) == 0
    assert main(["eval", "--data", data, "--codec", codec, "--report", str(tmp_path / "ev.jsonl"),
                 "--summary", str(tmp_path / "ev.json")]) == 0
    assert (tmp_path / "dec.jsonl").read_bytes() == (tmp_path / "ev.jsonl").read_bytes()
    dec, ev = (json.loads((tmp_path / f).read_text()) for f in ("dec.json", "ev.json"))
    assert dec["nmse_db"] == ev["nmse_db"]
    rows = [json.loads(x) for x in (tmp_path / "dec.jsonl").read_text().splitlines()]
    assert len(rows) == 40 and set(rows[0]) == {"env_id", "nmse_db", "r_hat", "bits"}
    assert load_dataset(tmp_path / "rec.egds").source == "reconstruction"


def test_decode_rejects_other_codec(workspace, tmp_path):
    data = str(workspace / "data" / "site000.egds")
    assert main(["encode", "--data", data, "--codec", str(workspace / "codec.bin"),
                 "--out", str(tmp_path / "s.egfb")]) == 0
    assert main(["train-codec", "--data", data, "--M", "3", "--out", str(tmp_path / "other.bin")]) == 0
    assert main(["decode", "--stream", str(tmp_path / "s.egfb"), "--codec", str(tmp_path / "other.bin")]) == 1


def test_raw_features_codec(workspace, tmp_path):
    out = tmp_path / "raw.bin"
    assert main(["train-codec", "--data", str(workspace / "data" / "site000.egds"), "--features", "raw",
                 "--M", "4", "--out", str(out)]) == 0
    assert out.stat().st_size > 0


@pytest.fixture
def exp_config(tmp_path):
    cfg = default_config(n_train=1, n_test=2, samples=80, test_samples=60, seeds=(0,))
    d = cfg.to_dict()
    d["include_passthrough"] = False
    d["name"] = "tiny"
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(d))
    return p


def test_experiment_twice_identical(exp_config, tmp_path):
    outs = []
    for k in (1, 2):
        out = tmp_path / f"run{k}"
        out.mkdir()
        assert main(["experiment", "--config", str(exp_config), "--seed", "1", "--out-dir", str(out)]) == 0
        outs.append(out)
    for name in ("tiny.csv", "tiny.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    doc = json.loads((outs[0] / "tiny.json").read_text())
    assert doc["config"]["seeds"] == [1]


def test_sweep_writes_files(exp_config, tmp_path, capsys):
    assert main(["sweep", "--config", str(exp_config), "--axis", "bits", "--grid", "2,4",
                 "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "tiny-sweep-bits.csv").exists()
    assert "eg" in capsys.readouterr().out


def test_experiment_missing_out_dir(exp_config, tmp_path):
    assert main(["experiment", "--config", str(exp_config), "--out-dir", str(tmp_path / "missing")]) == 1


@pytest.mark.parametrize("argv", [
    ["experiment"],
    ["encode", "--data", "x", "--codec", "y", "--out", "z", "--bogus"],
    ["frobnicate"],
    [],
    ["sweep", "--config", "c.json", "--axis", "time", "--grid", "1"],
])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ nope")
    assert main(["experiment", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"version": 99}))
    assert main(["experiment", "--config", str(bad)]) == 2
    assert main(["eval", "--config", str(bad), "--data", "x", "--codec", "y"]) == 2


def test_bad_grid(exp_config, tmp_path):
    assert main(["sweep", "--config", str(exp_config), "--axis", "bits", "--grid", "a,b",
                 "--out-dir", str(tmp_path)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "egcsi.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "experiment" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "egcsi.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == 2 and "error" in proc.stderr
