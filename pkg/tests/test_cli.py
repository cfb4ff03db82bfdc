import csv
import json
import os
import subprocess
import sys

import pytest

from sosgmm.cli import RunConfig, run
from sosgmm.errors import ConfigError
from sosgmm.io import read_json, read_samples


def call(*argv):
    return run([str(a) for a in argv])


def test_gen_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert call("gen", "--k", 2, "--d", 2, "--n", 200, "--preset", "mean-sep", "--seed", 7, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.json").exists()
    assert read_json(tmp_path / "a.truth.json")["kind"] == "mixture"


def test_config_echo_has_defaults(tmp_path):
    out = tmp_path / "g.csv"
    assert call("gen", "--n", 20, "--out", out) == 0
    echo = read_json(tmp_path / "g.config.json")
    assert echo["command"] == "gen"
    assert echo["config"]["preset"] == "mean-sep"
    assert echo["config"]["seed"] == 0


def test_config_file_with_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 30, "seed": 3}))
    out = tmp_path / "g.csv"
    assert call("gen", "--config", cfg, "--n", 40, "--out", out) == 0
    s = read_samples(out)
    assert s.n == 40 and s.seed == 3


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SOSGMM_SEED", "11")
    assert call("gen", "--n", 10, "--out", tmp_path / "g.csv") == 0
    assert read_samples(tmp_path / "g.csv").seed == 11


@pytest.mark.parametrize(
    "argv,code",
    [
        (["gen", "--bogus", "1"], 2),
        (["frobnicate"], 2),
        ([], 2),
        (["gen", "--n", "-5"], 2),
        (["corrupt", "--input", "missing.csv"], 1),
        (["report", "--artifacts", "nothing-here"], 1),
    ],
)
def test_exit_codes(tmp_path, capsys, argv, code):
    assert call(*argv, "--out", tmp_path / "o.json") == code if argv else call() == code
    err = capsys.readouterr().err
    assert err.strip()
    if code == 1:
        assert "error" in json.loads(err.strip().splitlines()[-1])


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"frob": 1}))
    assert call("gen", "--config", cfg, "--out", tmp_path / "g.csv") == 2


def test_runconfig_validation():
    with pytest.raises(ConfigError):
        RunConfig("cluster", {"eps": 1.5})
    with pytest.raises(ConfigError):
        RunConfig("cluster", {"not_a_key": 1})
    assert RunConfig.from_dict(RunConfig("gen", {"n": 5}).to_dict()).to_dict() == RunConfig("gen", {"n": 5}).to_dict()


def test_anticoncentration_verify(tmp_path):
    out = tmp_path / "q.json"
    assert call("anticoncentration", "verify", "--eps", 0.1, "--out", out) == 0
    assert read_json(out)["pass"] is True


def test_separation_command(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"mean": [0, 0], "covariance": [[1, 0], [0, 1]]}))
    b.write_text(json.dumps({"mean": [20, 0], "covariance": [[1, 0], [0, 1]]}))
    out = tmp_path / "v.json"
    assert call("separation", a, b, "--mc-samples", 2000, "--out", out) == 0
    doc = read_json(out)
    lo, hi = doc["pairs"][0]["tv_bracket"]
    assert lo > 0.99 and doc["pairs"][0]["verdict"]["case"]


def test_check_conditions_command(tmp_path):
    s = tmp_path / "s.csv"
    assert call("gen", "--n", 4000, "--seed", 1, "--out", s) == 0
    out = tmp_path / "c.json"
    assert call("check-conditions", "--samples", s, "--t", 2, "--out", out) == 0
    assert read_json(out)["kind"] == "conditions"


@pytest.fixture(scope="module")
def estimate_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("est")
    assert call("gen", "--preset", "mean-sep", "--n", 200, "--seed", 1, "--out", d / "clean.csv") == 0
    assert call("gen", "--preset", "mean-sep", "--n", 2000, "--seed", 2, "--out", d / "fresh.csv") == 0
    assert call("corrupt", "--input", d / "clean.csv", "--eps", 0.05, "--seed", 1, "--out", d / "bad.csv") == 0
    arts = d / "artifacts"
    arts.mkdir()
    rc = call(
        "estimate", "--samples", d / "bad.csv", "--fresh", d / "fresh.csv", "--truth", d / "clean.truth.json",
        "--k", 2, "--t", 4, "--eps", 0.05, "--seed", 1, "--out", arts / "est.json",
    )
    assert rc == 0
    return d, arts


def test_estimate_artifact(estimate_run):
    _, arts = estimate_run
    doc = read_json(arts / "est.json")
    assert doc["kind"] == "estimate" and doc["schema"] == 1
    assert len(doc["means"]) == 2 and len(doc["covariances"][0]) == 4
    assert max(doc["tv_report"]["tv"]) <= 0.15


def test_report_single_row(estimate_run, tmp_path):
    _, arts = estimate_run
    out = tmp_path / "r.csv"
    assert call("report", "--artifacts", arts, "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1
    assert float(rows[0]["misclassification"]) <= 0.05
    assert float(rows[0]["max_tv_error"]) <= 0.15


def test_report_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert call("report", "--artifacts", tmp_path / "empty", "--out", tmp_path / "r.csv") == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "MissingInput"


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    r = subprocess.run(
        [sys.executable, "-m", "sosgmm", "gen", "--n", "10", "--out", str(tmp_path / "g.csv")],
        capture_output=True, text=True, env=env,
    )
    assert r.returncode == 0, r.stderr
    assert "samples" in json.loads(r.stdout)
