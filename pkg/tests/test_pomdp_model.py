import numpy as np
import pytest

from dynamics import EXIT, JointTransitionModel, blockage_matrix
from errors import EmptyCoverage, ImpossibleObservation
from link_phases import dt_feedback_distribution, optimal_outage_target
from pomdp_model import (
    ActionKind,
    ActionSlice,
    ActionSpec,
    LinkModel,
    belief_update,
    bt_windows,
    enumerate_actions,
    observation_probabilities,
    predict_belief,
    sample_outcome,
)

TOY_SNR = 100.0


def test_action_spec_validation():
    assert ActionSpec.training((3, 5), 2.0).duration == 3
    assert ActionSpec.transmission(4, 2.0, 7).n_observations == 2
    with pytest.raises(ValueError):
        ActionSpec(ActionKind.BT, (1, 2), 2.0, 2)
    with pytest.raises(ValueError):
        ActionSpec.transmission(1, 2.0, 1)
    with pytest.raises(ValueError):
        ActionSpec.training((1,), 0.0)
    with pytest.raises(ValueError):
        ActionSpec(ActionKind.HO, (1,), 0.0, 1)


def test_observation_labels_follow_scan_order():
    spec = ActionSpec.training((6, 2, 9), 1.0)
    assert spec.observation_label(0) is None
    assert spec.observation_label(2) == 2
    assert spec.observation_index(9) == 3
    assert spec.observation_index(None) == 0


def test_bt_windows_are_contiguous_and_unique():
    assert bt_windows([4, 5, 6], [2, 3, 1]) == [(4, 5, 6), (4, 5), (5, 6), (4,), (5,), (6,)]


def test_action_enumeration_order():
    actions = enumerate_actions([0, 1], [TOY_SNR], [4, 6], [1], 2)
    kinds = [a.kind for a in actions]
    assert kinds == [ActionKind.HO] + [ActionKind.BT] * 3 + [ActionKind.DT] * 4
    assert actions[0].duration == 2
    assert [(a.beams, a.duration) for a in actions[4:]] == [((0,), 4), ((0,), 6), ((1,), 4), ((1,), 6)]
    with pytest.raises(EmptyCoverage):
        enumerate_actions([], [TOY_SNR], [4])
    with pytest.raises(ValueError):
        enumerate_actions([0], [], [4])


def test_slices_conserve_probability(toy_link_model, toy_joint):
    for bs in (0, 1):
        for a, spec in enumerate(toy_link_model.actions[bs]):
            action = toy_link_model.slice(bs, a)
            assert len(action.blocks) == spec.n_observations
            mass = sum(np.asarray(b.sum(axis=1)).ravel() for b in action.blocks)
            survive = np.asarray(toy_joint.power(spec.duration).sum(axis=1)).ravel()
            assert np.allclose(mass, survive)
            assert np.allclose(mass + action.exit, 1.0)
            assert action.row_mass_error() < 1e-12


def test_handover_switches_bs_and_costs_nothing(toy_link_model):
    ho = toy_link_model.slice_for(0, ActionSpec.handover(1))
    assert ho.next_bs == 1
    assert np.all(ho.cost == 0.0) and np.all(ho.reward == 0.0)


def test_training_feedback_depends_on_the_start_state(toy_link_model, toy_joint):
    spec = ActionSpec.training((0, 1), TOY_SNR)
    action = toy_link_model.slice_for(0, spec)
    # aligned unblocked on BPI 0: reporting BPI 0 is the likeliest outcome
    u = toy_joint.state_index((0, 0), 1, 1)
    probs = observation_probabilities(toy_link_model.point_belief(u), action)
    assert np.argmax(probs[:-1]) == 1
    # blocked towards BS 0: mostly no report
    blocked = toy_joint.state_index((0, 0), 0, 1)
    probs = observation_probabilities(toy_link_model.point_belief(blocked), action)
    assert np.argmax(probs[:-1]) == 0
    assert probs.sum() == pytest.approx(1.0)


def test_transmission_rewards_only_reachable_alignment(toy_link_model, toy_joint):
    action = toy_link_model.slice_for(0, ActionSpec.transmission(0, TOY_SNR, 6))
    # pair (1, 1) never returns to pair (0, 0), so BPI 0 is never aligned from there
    for b0 in (0, 1):
        for b1 in (0, 1):
            assert action.reward[toy_joint.state_index((1, 1), b0, b1)] == 0.0
    aligned = toy_joint.state_index((0, 0), 1, 1)
    blocked = toy_joint.state_index((0, 0), 0, 1)
    assert action.reward[aligned] > action.reward[blocked] > 0.0
    assert np.allclose(action.cost, action.cost[0])
    assert action.cost[0] == pytest.approx(toy_link_model.energy_cost(0, action.spec))


def test_energy_cost_averages_power_over_scanned_beams(toy_link_model, toy_params):
    spec = ActionSpec.training((0, 1), TOY_SNR)
    per_slot = toy_params.slot_duration * toy_params.noise_power * TOY_SNR / 1e-9
    assert toy_link_model.energy_cost(0, spec) == pytest.approx(2 * per_slot)


def _dense_toy():
    tensor = np.zeros((2, 2, 2))
    tensor[0, 0, 0] = 0.2
    tensor[0, 1, 1] = 0.5
    tensor[1, 0, 1] = 0.9
    return ActionSlice.from_dense(ActionSpec.training((7,), 1.0), tensor, 0.0, 0.0, 0)


def test_belief_update_is_bayes_rule():
    action = _dense_toy()
    belief = np.array([0.5, 0.5])
    posterior = belief_update(belief, action, 0)
    assert np.allclose(posterior, [0.1 / 0.55, 0.45 / 0.55])
    assert belief_update(belief, action, EXIT) is None
    assert np.allclose(predict_belief(belief, action), [0.1 / 0.8, 0.7 / 0.8])


def test_impossible_observation_is_reported():
    action = _dense_toy()
    with pytest.raises(ImpossibleObservation) as info:
        belief_update(np.array([0.0, 1.0]), action, 1)
    assert info.value.to_dict()["error"] == "IMPOSSIBLE_OBSERVATION"


def test_sampled_outcomes_follow_the_slice():
    action = _dense_toy()
    rng = np.random.default_rng(5)
    n = 20000
    draws = [sample_outcome(action, 0, rng) for _ in range(n)]
    freq = {
        "stay": sum(d == (0, 0) for d in draws) / n,
        "move": sum(d == (1, 1) for d in draws) / n,
        "exit": sum(d == (EXIT, None) for d in draws) / n,
    }
    for key, p in (("stay", 0.2), ("move", 0.5), ("exit", 0.3)):
        assert abs(freq[key] - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_model_caches_slices_and_builds_unlisted_scans(toy_link_model):
    spec = ActionSpec.training((1,), TOY_SNR * 2)
    assert spec not in toy_link_model.actions[0]
    first = toy_link_model.slice_for(0, spec)
    assert toy_link_model.slice_for(0, spec) is first
    assert first.eta is not None


def _dt_feedback_by_state(joint, params, spec, eta, rho):
    on = dt_feedback_distribution(spec.snr, params.pilot_fraction, params.symbols, eta, rho, True)
    off = dt_feedback_distribution(spec.snr, params.pilot_fraction, params.symbols, eta, rho, False)
    rows = []
    for v in range(joint.n_states):
        pair, b0, _ = joint.decode(v)
        rows.append(on if pair[0] == spec.beams[0] and b0 == 1 else off)
    return np.array(rows)


@pytest.mark.parametrize("beam, duration", [(0, 4), (0, 6), (1, 4), (1, 6)])
def test_transmission_slice_matches_explicit_sums(toy_link_model, toy_joint, toy_params, beam, duration):
    spec = ActionSpec.transmission(beam, TOY_SNR, duration)
    action = toy_link_model.slice_for(0, spec)
    feedback = _dt_feedback_by_state(toy_joint, toy_params, spec, action.eta, 0.03)
    one = toy_joint.one_step.toarray()
    lead = np.linalg.matrix_power(one, duration - 2)
    n = toy_joint.n_states

    for y in range(2):
        expected = np.zeros((n, n))
        for u in range(n):
            for u_next in range(n):
                expected[u, u_next] = sum(
                    lead[u, v] * feedback[v, y] * one[v, w] * one[w, u_next]
                    for v in range(n) for w in range(n)
                )
        assert np.allclose(action.blocks[y].toarray(), expected, rtol=0.0, atol=1e-14)

    _, per_second = optimal_outage_target(spec.snr, toy_params.pilot_fraction, toy_params.bandwidth)
    aligned = np.array([
        1.0 if toy_joint.decode(v)[0][0] == beam and toy_joint.decode(v)[1] == 1 else 0.0 for v in range(n)
    ])
    powers = [np.linalg.matrix_power(one, t) for t in range(duration - 1)]
    for u in range(n):
        slots = sum(powers[t][u, v] * aligned[v] for t in range(duration - 1) for v in range(n))
        assert action.reward[u] == pytest.approx(per_second * toy_params.slot_duration * slots, rel=1e-12, abs=1e-18)


def test_static_aligned_link_earns_every_data_slot(toy_calibrations, toy_params):
    frozen = JointTransitionModel(
        [(0, 0)], np.array([[1.0]]), [blockage_matrix(0.0, 0.0), blockage_matrix(0.0, 0.0)],
        slot_duration=toy_params.slot_duration, entry_pair=(0, 0),
    )
    spec = ActionSpec.transmission(0, TOY_SNR, 7)
    model = LinkModel(frozen, toy_calibrations, toy_params, [[spec], [spec]])
    action = model.slice_for(0, spec)
    _, per_second = optimal_outage_target(TOY_SNR, toy_params.pilot_fraction, toy_params.bandwidth)

    for b0 in (0, 1):
        for b1 in (0, 1):
            u = frozen.state_index((0, 0), b0, b1)
            expected = (spec.duration - 1) * per_second * toy_params.slot_duration if b0 else 0.0
            assert action.reward[u] == pytest.approx(expected, rel=1e-12)
    # nothing moves, so the feedback block is diagonal
    feedback = _dt_feedback_by_state(frozen, toy_params, spec, action.eta, 0.03)
    for y in range(2):
        assert np.allclose(action.blocks[y].toarray(), np.diag(feedback[:, y]), rtol=0.0, atol=1e-15)


def _brute_force_posterior(tensor, belief, y):
    n = belief.size
    joint = np.zeros(n)
    for u_next in range(n):
        for u in range(n):
            joint[u_next] += belief[u] * tensor[u, y, u_next]
    return joint / joint.sum()


@pytest.mark.parametrize("bs", [0, 1])
@pytest.mark.parametrize("action_index", range(8))
def test_belief_update_matches_bayes_for_every_action_and_observation(toy_link_model, bs, action_index):
    action = toy_link_model.slice(bs, action_index)
    tensor = np.stack([block.toarray() for block in action.blocks], axis=1)
    rng = np.random.default_rng(100 * bs + action_index)
    beliefs = [rng.dirichlet(np.ones(toy_link_model.n_states)) for _ in range(3)]
    beliefs.append(toy_link_model.point_belief(toy_link_model.joint.state_index((0, 0), 1, 1)))
    for belief in beliefs:
        for y in range(action.spec.n_observations):
            if (belief @ tensor[:, y, :]).sum() == 0.0:
                with pytest.raises(ImpossibleObservation):
                    belief_update(belief, action, y)
                continue
            posterior = belief_update(belief, action, y)
            assert np.allclose(posterior, _brute_force_posterior(tensor, belief, y), rtol=0.0, atol=1e-12)
