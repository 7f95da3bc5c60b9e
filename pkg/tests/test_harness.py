import numpy as np
import pytest

from errors import ConfigError
from harness import (
    RESULT_HEADER,
    TRACE_HEADER,
    apply_sweep_value,
    evaluate,
    linkstats_report,
    make_policy,
    run_episode,
    summarize,
    sweep,
)
from schemas import ExperimentConfig, Mode, PolicyName, SweepVariable


def test_context_is_consistent(small_context):
    ctx = small_context
    assert ctx.model.n_states == 4 * ctx.joint.n_pairs
    for bs in (0, 1):
        assert ctx.sbpi_sets[bs]
        assert ctx.model.actions[bs][0].kind.value == "HO"
    assert ctx.duration > 0.0
    assert ctx.joint.has_pair(ctx.joint.entry_pair)


def test_sectored_evaluation_reports_confidence_intervals(small_context):
    report, traces = evaluate(PolicyName.fsm, small_context, Mode.sectored, 6, seed=1, trace_episodes=1)
    assert report.episodes == 6
    assert report.se_ci[0] <= report.spectral_efficiency <= report.se_ci[1]
    assert report.power_w > 0.0
    assert report.duration_s == pytest.approx(small_context.duration)
    assert len(traces) == 1
    assert set(traces[0].rows[0]) == set(TRACE_HEADER)
    row = report.as_row()
    assert set(row) == set(RESULT_HEADER)
    assert row["status"] == "ok"


def test_evaluation_is_reproducible(small_context):
    first, _ = evaluate(PolicyName.bheu, small_context, Mode.sectored, 4, seed=9)
    second, _ = evaluate(PolicyName.bheu, small_context, Mode.sectored, 4, seed=9)
    assert first.spectral_efficiency == second.spectral_efficiency
    assert first.energy_j == second.energy_j


@pytest.mark.parametrize("name", [PolicyName.bheu, PolicyName.genie, PolicyName.baseline])
def test_analog_episodes_run_slot_by_slot(name, small_context):
    policy = make_policy(name, small_context)
    trace = run_episode(policy, small_context, Mode.analog, np.random.default_rng(2), record=True)
    assert trace.slots > 0
    assert trace.bits >= 0.0 and trace.energy > 0.0
    assert sum(r["bits"] for r in trace.rows) == pytest.approx(trace.bits)
    assert all(r["action"] in ("BT", "DT", "HO") for r in trace.rows)


def test_analog_metrics_use_measured_durations(small_context):
    policy = make_policy(PolicyName.fsm, small_context)
    traces = [run_episode(policy, small_context, Mode.analog, np.random.default_rng(s)) for s in range(3)]
    report = summarize("fsm", Mode.analog, small_context, traces)
    expected = np.mean([t.slots for t in traces]) * small_context.config.link.slot_duration
    assert report.duration_s == pytest.approx(expected)


def test_cpbvi_needs_a_solved_artifact(small_context):
    with pytest.raises(ConfigError):
        make_policy(PolicyName.cpbvi, small_context)


def test_sweep_marks_failed_points(small_config, small_context):
    cfg = small_config.model_copy(deep=True)
    cfg.sweep.variable = SweepVariable.dt_duration
    cfg.sweep.values = [1, 10]
    cfg.sweep.policies = [PolicyName.fsm, PolicyName.genie]
    rows = sweep(cfg, small_context.geometry, small_context.joint)
    assert [(r["value"], r["policy"], r["status"]) for r in rows] == [
        (1, "fsm", "failed"), (1, "genie", "failed"), (10, "fsm", "ok"), (10, "genie", "ok"),
    ]
    assert rows[0]["error"] == "INVALID_ARGUMENT"


def test_scenario_sweep_needs_scenarios(small_config, small_context):
    cfg = small_config.model_copy(deep=True)
    cfg.sweep.variable = SweepVariable.scenario
    with pytest.raises(ConfigError):
        sweep(cfg, small_context.geometry, small_context.joint)


def test_scenario_sweep_averages_users(small_config, small_context):
    cfg = small_config.model_copy(deep=True)
    cfg.simulation.episodes = 2
    cfg.training.trajectories = 50
    cfg.sweep.variable = SweepVariable.scenario
    cfg.sweep.policies = [PolicyName.genie]
    cfg = ExperimentConfig.model_validate({
        **cfg.model_dump(mode="json"),
        "scenarios": [{"label": "jam", "users": 2, "mean_speed": 20.0,
                       "steady_state_prob": [0.4, 0.4], "mean_duration": [0.5, 0.5]}],
    })
    rows = sweep(cfg, small_context.geometry)
    assert len(rows) == 1
    assert rows[0]["value"] == "jam"
    assert rows[0]["users"] == 2 and rows[0]["mean_speed"] == 20.0
    assert rows[0]["episodes"] == 4


def test_sweep_values_are_validated(small_config):
    cfg = apply_sweep_value(small_config, SweepVariable.snr_pre_db, 6.0)
    assert cfg.heuristics.snr_pre_db == 6.0 and cfg.actions.snr_pre_db == [6.0]
    assert small_config.heuristics.snr_pre_db == 18.0
    with pytest.raises(ValueError):
        apply_sweep_value(small_config, SweepVariable.dt_duration, 1)


def test_linkstats_report_uses_the_configured_sidelobe_ratio(small_config):
    report = linkstats_report(small_config, snr_db=[0.0, 10.0], bt_sizes=(2,))
    assert report["rho_db"] == -15.0
    assert [p["snr_db"] for p in report["points"]] == [0.0, 10.0]
    assert report["symbols_per_slot"] == pytest.approx(1e4)
