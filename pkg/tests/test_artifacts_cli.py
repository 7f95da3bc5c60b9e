import json
import math

import pytest

import artifacts
import cli
from config import config_hash, load_config
from errors import ArtifactMismatch, ConfigError
from pomdp_model import TabularModel


def test_dumps_is_deterministic_and_strict():
    payload = {"b": [1.5, math.inf], "a": {"nan": math.nan, "x": 2}}
    text = artifacts.dumps(payload)
    assert text == artifacts.dumps(dict(reversed(list(payload.items()))))
    data = json.loads(text)
    assert data["b"] == [1.5, None]
    assert data["a"]["nan"] is None


def test_artifacts_are_bound_to_their_config(tmp_path):
    artifacts.write_artifact(tmp_path, artifacts.POLICY, {"lambda": 0.5}, "abc")
    data = artifacts.read_artifact(tmp_path, artifacts.POLICY, "abc")
    assert data["lambda"] == 0.5 and data["schema_version"] == artifacts.SCHEMA_VERSION
    with pytest.raises(ArtifactMismatch):
        artifacts.read_artifact(tmp_path, artifacts.POLICY, "def")
    with pytest.raises(ArtifactMismatch):
        artifacts.read_artifact(tmp_path, artifacts.TRANSITIONS)


def test_csv_keeps_full_float_precision():
    text = artifacts.csv_text(["policy", "value"], [{"policy": "fsm", "value": 0.1 + 0.2}, {"policy": "x"}])
    assert text.splitlines() == ["policy,value", "fsm,0.30000000000000004", "x,"]


def test_figure_rows_follow_the_sweep_variable():
    rows = [{"value": 6.0, "policy": "fsm"}]
    assert artifacts.figure_rows("snr_pre_db", rows)["fig_se_vs_power.csv"][0]["snr_pre_db"] == 6.0
    assert artifacts.figure_rows("dt_duration", rows)["fig_se_vs_tdt.csv"][0]["dt_duration"] == 6.0
    assert artifacts.figure_rows("scenario", rows)["fig_scenarios.csv"][0]["label"] == 6.0


def test_config_hash_ignores_runtime_sections(small_config):
    other = small_config.model_copy(update={"seed": 99, "output_dir": "/elsewhere"})
    assert config_hash(other) == config_hash(small_config)
    changed = small_config.model_copy(deep=True)
    changed.link.pilot_fraction = 0.02
    assert config_hash(changed) != config_hash(small_config)


def test_load_config_reports_validation_issues(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"link": {"pilot_fraction": 2.0}}))
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.to_dict()["issues"][0]["loc"] == ["link", "pilot_fraction"]
    assert load_config(None).scene.segment_length == 30.0


@pytest.fixture
def config_file(tmp_path, small_config_dict):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(small_config_dict))
    return path


def test_linkstats_command(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    code = cli.main(["linkstats", "--config", str(config_file), "--out", str(out), "--snr-db", "0", "10",
                     "--bt-sizes", "1", "2", "--quiet"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert len(printed["points"]) == 2
    stored = artifacts.read_artifact(out, artifacts.LINKSTATS, config_hash(load_config(config_file)))
    assert stored["points"][1]["snr_db"] == 10.0


def test_failures_exit_with_a_json_error(tmp_path, capsys):
    code = cli.main(["simulate", "--config", str(tmp_path / "missing.json"), "--quiet"])
    assert code == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "INVALID_CONFIG"


def test_build_simulate_and_analyze(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    common = ["--config", str(config_file), "--out", str(out), "--quiet"]
    assert cli.main(["build-model", *common]) == 0
    built = json.loads(capsys.readouterr().out)
    assert built["n_states"] == 4 * built["n_pairs"]

    digest = config_hash(load_config(config_file))
    link_model = artifacts.read_artifact(out, artifacts.LINK_MODEL, digest)
    model = TabularModel.from_dict(link_model)
    assert [len(a) for a in model.actions] == built["actions"]

    assert cli.main(["simulate", *common, "--mode", "sectored"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert [r["policy"] for r in result["results"]] == ["bheu", "fsm", "baseline", "genie"]
    assert (out / "results.csv").read_text().splitlines()[0].startswith("policy,variable,value")
    assert (out / "trace_fsm.csv").exists()

    assert cli.main(["analyze-fsm", *common]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["fsm"]["reward_bits"] > 0.0
    analysis = artifacts.read_artifact(out, artifacts.FSM_ANALYSIS, digest)
    assert len(analysis["fsm"]["per_state"]) == built["n_states"]


def test_solve_writes_the_policy_even_without_convergence(tmp_path, config_file, capsys):
    out = tmp_path / "solve"
    common = ["--config", str(config_file), "--out", str(out), "--quiet"]
    assert cli.main(["build-model", *common]) == 0
    capsys.readouterr()
    code = cli.main(["solve", *common])
    assert code in (0, 3)
    assert artifacts.artifact_path(out, artifacts.POLICY).exists()
    header = (out / "convergence.csv").read_text().splitlines()[0]
    assert header == ",".join(artifacts.CONVERGENCE_HEADER)
