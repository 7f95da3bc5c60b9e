import numpy as np
import pytest

from errors import SingularSystem
from harness import run_episode
from policies import (
    BaselinePolicy,
    BheuParams,
    FsmActions,
    FsmPolicy,
    FsmState,
    GeniePolicy,
    TrueState,
    baseline_step,
    bheu_action,
    belief_marginals,
    fsm_closed_form,
    fsm_step,
    fsm_summary,
    smallest_cover,
)
from pomdp_model import ActionKind, ActionSlice, ActionSpec, TabularModel

BT0 = FsmState(ActionKind.BT, 0)
HO0 = FsmState(ActionKind.HO, 0)


def test_fsm_transitions():
    assert fsm_step(BT0, None) == HO0
    assert fsm_step(BT0, 3) == FsmState(ActionKind.DT, 0, 3)
    assert fsm_step(FsmState(ActionKind.DT, 0, 3), 3) == FsmState(ActionKind.DT, 0, 3)
    assert fsm_step(FsmState(ActionKind.DT, 0, 3), None) == BT0
    assert fsm_step(HO0, None) == FsmState(ActionKind.BT, 1)


def test_fsm_rejects_feedback_outside_the_alphabet():
    with pytest.raises(ValueError):
        fsm_step(FsmState(ActionKind.DT, 0, 3), 4)
    with pytest.raises(ValueError):
        fsm_step(HO0, 2)


def test_baseline_retrains_after_every_transmission():
    assert baseline_step(FsmState(ActionKind.DT, 1, 2), 2) == FsmState(ActionKind.BT, 1)
    assert baseline_step(FsmState(ActionKind.DT, 1, 2), None) == FsmState(ActionKind.BT, 1)
    assert baseline_step(BT0, 5) == FsmState(ActionKind.DT, 0, 5)


def test_smallest_cover_is_greedy_by_occupancy():
    xi = np.array([0.2, 0.5, 0.3])
    assert smallest_cover(xi, 0.5) == [1]
    assert smallest_cover(xi, 0.6) == [1, 2]
    assert smallest_cover(xi, 1.0) == [0, 1, 2]


@pytest.fixture
def pair_model():
    """Structure-only model over pairs (0, 0) and (1, 0)."""
    return TabularModel(8, [[], []], {"pairs": [[0, 0], [1, 0]]})


def test_bheu_thresholds(pair_model):
    params = BheuParams((0.1, 0.8, 0.6), (10.0, 10.0), 5)
    # aligned on BPI 0 and unblocked towards BS 0
    belief = pair_model.point_belief(3)
    assert bheu_action(belief, 0, params, pair_model, [0, 1]) == ActionSpec.transmission(0, 10.0, 5)
    # blocked towards BS 0
    assert bheu_action(pair_model.point_belief(1), 0, params, pair_model, [0, 1]) == ActionSpec.handover(1)
    # split between the two beams
    split = np.zeros(8)
    split[3] = split[7] = 0.5
    assert bheu_action(split, 0, params, pair_model, [0, 1]) == ActionSpec.training((0, 1), 10.0)
    unblocked, xi = belief_marginals(split, 0, pair_model, [0, 1])
    assert unblocked == pytest.approx(1.0)
    assert np.allclose(xi, [0.5, 0.5])


def test_bheu_rejects_thresholds_outside_the_unit_interval():
    with pytest.raises(ValueError):
        BheuParams((0.0, 0.8, 0.6), (1.0, 1.0), 5)


def test_genie_hands_over_only_towards_a_clear_link():
    genie = GeniePolicy((5.0, 6.0), 8)
    assert genie.act(0, None, TrueState((2, 4), (0, 1))) == ActionSpec.handover(1)
    assert genie.act(0, None, TrueState((2, 4), (0, 0))) == ActionSpec.transmission(2, 5.0, 8)
    assert genie.act(1, None, TrueState((2, 4), (0, 1))) == ActionSpec.transmission(4, 6.0, 8)


@pytest.mark.parametrize("bs_index", [0, 1])
def test_genie_stays_and_transmits_when_both_links_are_blocked(bs_index):
    genie = GeniePolicy((5.0, 6.0), 8, ho_duration=2)
    action = genie.act(bs_index, None, TrueState((2, 4), (0, 0)))
    assert action.kind == ActionKind.DT
    assert action == ActionSpec.transmission((2, 4)[bs_index], (5.0, 6.0)[bs_index], 8)


def test_fsm_nodes(toy_fsm):
    nodes = toy_fsm.nodes(1)
    assert nodes[:2] == [FsmState(ActionKind.BT, 1), FsmState(ActionKind.HO, 1)]
    assert [n.beam for n in nodes[2:]] == [0, 1]
    assert toy_fsm.spec(FsmState(ActionKind.BT, 1)) == ActionSpec.training((0, 1), 100.0)


@pytest.mark.parametrize("policy_cls", [FsmPolicy, BaselinePolicy])
def test_closed_form_matches_monte_carlo(policy_cls, toy_fsm, toy_link_model, toy_context):
    step = fsm_step if policy_cls is FsmPolicy else baseline_step
    analysis = fsm_closed_form(toy_link_model, toy_fsm, step)
    u0, bs = toy_context.initial_state, toy_context.initial_bs
    reward, cost = analysis.totals(u0, FsmState(ActionKind.BT, bs))

    policy = policy_cls(toy_fsm)
    rng = np.random.default_rng(21)
    traces = [run_episode(policy, toy_context, "sectored", rng) for _ in range(3000)]
    for expected, samples in ((reward, [t.bits for t in traces]), (cost, [t.energy for t in traces])):
        samples = np.array(samples)
        stderr = samples.std(ddof=1) / np.sqrt(samples.size)
        assert abs(samples.mean() - expected) < 4 * stderr

    summary = fsm_summary(analysis, u0, bs, toy_context.duration, 1e6)
    assert summary["spectral_efficiency"] == pytest.approx(reward / toy_context.duration / 1e6)


def test_chain_without_exit_is_singular():
    tensor = np.zeros((1, 2, 1))
    tensor[0, 0, 0] = 1.0
    slices = []
    for bs in (0, 1):
        per_bs = [ActionSlice.from_dense(ActionSpec.training((0,), 1.0), tensor, 0.0, 1.0, bs)]
        per_bs.append(ActionSlice.from_dense(ActionSpec.handover(1), tensor[:, :1, :], 0.0, 0.0, 1 - bs))
        per_bs.append(ActionSlice.from_dense(ActionSpec.transmission(0, 1.0, 2), np.zeros((1, 2, 1)), 0.0, 0.0, bs))
        slices.append(per_bs)
    model = TabularModel(1, slices)
    fsm = FsmActions(((0,), (0,)), (1.0, 1.0), 2)
    with pytest.raises(SingularSystem):
        fsm_closed_form(model, fsm)
