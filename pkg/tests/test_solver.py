import math

import numpy as np
import pytest

from errors import NotConverged
from pomdp_model import ActionSlice, ActionSpec, TabularModel
from schemas import SolverConfig
from solver import (
    HyperplaneSet,
    PolicyArtifact,
    _scaled_actions,
    build_belief_sets,
    cpbvi,
    perseus_backup,
    policy_action,
    require_converged,
    seed_belief_set,
    solver_scales,
    ssea_expand,
)


def _solve(model, budget=math.inf, **settings):
    cfg = SolverConfig(**settings)
    sets = build_belief_sets(model, None, 0, np.random.default_rng(0))
    return cpbvi(model, sets, model.point_belief(0), 0, 1.0, 1.0, budget, cfg, seed=3)


def test_static_model_reaches_the_closed_form_value(make_static_model):
    q = 0.5
    artifact = _solve(make_static_model(q), max_iterations=200)
    assert artifact.converged
    q0 = artifact.hyperplanes[0]
    for belief in ([0.5, 0.5], [1.0, 0.0], [0.2, 0.8]):
        assert q0.values(np.array(belief), 0.0)[0] == pytest.approx(max(belief) / q, abs=0.03)
    assert artifact.lam == 0.0


def test_policy_picks_the_beam_the_belief_favours(make_static_model):
    artifact = _solve(make_static_model(), max_iterations=200)
    spec, reward, cost = policy_action(np.array([0.3, 0.7]), 0, artifact)
    assert spec.beams == (1,)
    assert reward == pytest.approx(1.4, abs=0.05)
    assert cost == 0.0


def _sense_or_send_model(stay=0.75):
    """Two static states: "sense" reveals the state for no reward, DT on beam k earns 1 in state k."""
    sense = np.zeros((2, 3, 2))
    sense[0, 1, 0] = sense[1, 2, 1] = stay
    send = np.zeros((2, 2, 2))
    send[0, 0, 0] = send[1, 0, 1] = stay
    slices = []
    for bs in (0, 1):
        per_bs = [ActionSlice.from_dense(ActionSpec.training((0, 1), 1.0), sense, 0.0, 0.0, bs)]
        for k in (0, 1):
            per_bs.append(ActionSlice.from_dense(ActionSpec.transmission(k, 1.0, 2), send, np.eye(2)[k], 0.0, bs))
        slices.append(per_bs)
    return TabularModel(2, slices)


def _value_iteration_on_a_grid(grid, stay, tol=1e-13):
    """Exact Bellman iteration over p = P(state 0); beliefs only move to a vertex after sensing."""
    value = np.zeros_like(grid)
    while True:
        send = np.maximum(grid, 1.0 - grid) + stay * value
        sense = stay * (grid * value[-1] + (1.0 - grid) * value[0])
        updated = np.maximum(send, sense)
        if np.max(np.abs(updated - value)) < tol:
            return updated
        value = updated


def test_point_based_value_matches_exact_value_iteration():
    stay = 0.75
    model = _sense_or_send_model(stay)
    artifact = _solve(model, eps_v=1e-10, max_iterations=1000)
    assert artifact.converged
    q0 = artifact.hyperplanes[0]

    grid = np.linspace(0.0, 1.0, 1001)
    exact = _value_iteration_on_a_grid(grid, stay)
    assert np.allclose(exact, np.maximum(4.0 * np.maximum(grid, 1.0 - grid), 3.0), atol=1e-10)

    seeded = seed_belief_set(model, 0)
    expected = np.interp(seeded[:, 0], grid, exact)
    assert np.allclose(q0.values(seeded, 0.0), expected, atol=1e-4)
    checks = grid[::50]
    beliefs = np.column_stack([checks, 1.0 - checks])
    assert np.allclose(q0.values(beliefs, 0.0), exact[::50], atol=1e-4)


def test_perseus_stage_never_lowers_a_value(make_static_model):
    model = make_static_model(0.3)
    beliefs = seed_belief_set(model, 0)
    actions = _scaled_actions(model, 0, 1.0, 1.0)
    rng = np.random.default_rng(2)
    current = [HyperplaneSet.zero(2, 0), HyperplaneSet.zero(2, 0)]
    for _ in range(5):
        updated = perseus_backup(0, beliefs, current, actions, 0.0, rng)
        assert np.all(updated.values(beliefs, 0.0) >= current[0].values(beliefs, 0.0) - 1e-12)
        current = [updated, updated]


def test_slack_budget_leaves_the_multiplier_at_zero(make_budget_model):
    artifact = _solve(make_budget_model(), budget=3.0, max_iterations=200)
    assert artifact.converged
    assert artifact.lam == 0.0
    assert artifact.history[-1]["reward"] == pytest.approx(2.0, abs=0.02)


def test_binding_budget_drives_the_multiplier_up(make_budget_model):
    artifact = _solve(make_budget_model(), budget=1.0, max_iterations=40)
    lambdas = [h["lambda"] for h in artifact.history]
    assert lambdas[1] == 0.0
    # λ_2 = λ_1 + γ0/2 · (1.5 - 1)
    assert lambdas[2] == pytest.approx(0.025)
    assert all(b >= a for a, b in zip(lambdas, lambdas[1:]))
    assert not artifact.converged
    with pytest.raises(NotConverged) as info:
        require_converged(artifact)
    assert info.value.code == "NON_CONVERGED"


def test_seed_belief_set_covers_vertices_and_pair_masks(toy_link_model):
    points = seed_belief_set(toy_link_model, 0)
    n = toy_link_model.n_states
    assert np.allclose(points[:n], np.eye(n))
    assert np.allclose(points[n], 1.0 / n)
    assert np.allclose(points.sum(axis=1), 1.0)
    assert len({p.tobytes() for p in points}) == len(points)
    with pytest.raises(ValueError):
        seed_belief_set(toy_link_model, 0, size=n)


def _noisy_sensor_model():
    slices = []
    for bs in (0, 1):
        tensor = np.zeros((2, 2, 2))
        tensor[0, 1, 0], tensor[0, 0, 0] = 0.8, 0.2
        tensor[1, 1, 1], tensor[1, 0, 1] = 0.2, 0.8
        sense = ActionSlice.from_dense(ActionSpec.training((0,), 1.0), tensor, 0.0, 0.0, bs)
        stay = np.zeros((2, 1, 2))
        stay[0, 0, 0] = stay[1, 0, 1] = 1.0
        switch = ActionSlice.from_dense(ActionSpec.handover(1), stay, 0.0, 0.0, 1 - bs)
        slices.append([switch, sense])
    return TabularModel(2, slices)


def test_exploration_adds_only_new_beliefs():
    model = _noisy_sensor_model()
    seeds = [seed_belief_set(model, bs) for bs in (0, 1)]
    expanded = ssea_expand(seeds, model, 1, np.random.default_rng(8))
    for bs in (0, 1):
        assert len(expanded[bs]) == 4
        added = expanded[bs][-1]
        assert np.allclose(added, [0.8, 0.2]) or np.allclose(added, [0.2, 0.8])


def test_solver_scales():
    r, c, b = solver_scales(2.0, 1e8, 0.04)
    assert r == pytest.approx(1 / 2e8)
    assert c == pytest.approx(1 / 0.08)
    assert b == 1.0
    _, c, b = solver_scales(2.0, 1e8, None)
    assert c == pytest.approx(0.5) and math.isinf(b)
    with pytest.raises(ValueError):
        solver_scales(0.0, 1e8, 0.04)


def test_artifact_survives_serialization(make_static_model):
    artifact = _solve(make_static_model(), max_iterations=50)
    restored = PolicyArtifact.from_dict(artifact.to_dict())
    assert math.isinf(restored.budget)
    belief = np.array([0.6, 0.4])
    assert policy_action(belief, 0, restored)[0] == policy_action(belief, 0, artifact)[0]
