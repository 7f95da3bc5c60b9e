"""Heuristic and optimized BT/DT/HO policies.

A policy is driven through ``reset``/``act``/``observe``. ``act`` receives
the serving BS, the current belief (``None`` for policies that do not track
one) and the true state, which only the genie looks at.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from errors import SingularSystem
from pomdp_model import ActionKind, ActionSpec, PomdpModel
from solver import PolicyArtifact, policy_action

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FsmState:
    kind: ActionKind
    bs: int
    beam: Optional[int] = None

    @property
    def label(self) -> str:
        return self.kind.value if self.beam is None else f"{self.kind.value}:{self.beam}"


@dataclass(frozen=True)
class TrueState:
    pair: Tuple[int, int]
    unblocked: Tuple[int, int]


def fsm_step(state: FsmState, y: Optional[int]) -> FsmState:
    """Next action after feedback ``y`` (a BPI, or ``None`` for no report)."""
    if state.kind == ActionKind.BT:
        if y is None:
            return FsmState(ActionKind.HO, state.bs)
        return FsmState(ActionKind.DT, state.bs, int(y))
    if state.kind == ActionKind.DT:
        if y is None:
            return FsmState(ActionKind.BT, state.bs)
        if y != state.beam:
            raise ValueError(f"DT on beam {state.beam} cannot report beam {y}")
        return state
    if y is not None:
        raise ValueError("handover produces no beam report")
    return FsmState(ActionKind.BT, 1 - state.bs)


def baseline_step(state: FsmState, y: Optional[int]) -> FsmState:
    """Like :func:`fsm_step` except that every DT round is followed by BT."""
    if state.kind == ActionKind.DT:
        if y is not None and y != state.beam:
            raise ValueError(f"DT on beam {state.beam} cannot report beam {y}")
        return FsmState(ActionKind.BT, state.bs)
    return fsm_step(state, y)


@dataclass(frozen=True)
class FsmActions:
    """Fixed-parameter actions the FSM heuristics map their states onto."""
    sbpi_sets: Tuple[Tuple[int, ...], Tuple[int, ...]]
    snr: Tuple[float, float]
    dt_duration: int
    ho_duration: int = 1

    def spec(self, state: FsmState) -> ActionSpec:
        if state.kind == ActionKind.HO:
            return ActionSpec.handover(self.ho_duration)
        if state.kind == ActionKind.BT:
            return ActionSpec.training(self.sbpi_sets[state.bs], self.snr[state.bs])
        return ActionSpec.transmission(state.beam, self.snr[state.bs], self.dt_duration)

    def nodes(self, bs_index: int) -> List[FsmState]:
        nodes = [FsmState(ActionKind.BT, bs_index), FsmState(ActionKind.HO, bs_index)]
        nodes.extend(FsmState(ActionKind.DT, bs_index, j) for j in self.sbpi_sets[bs_index])
        return nodes


# ── Closed form ───────────────────────────────────────────────────────────────
@dataclass
class FsmAnalysis:
    nodes: List[FsmState]
    n_states: int
    reward: np.ndarray
    cost: np.ndarray

    def index(self, u: int, node: FsmState) -> int:
        return self.nodes.index(node) * self.n_states + u

    def totals(self, u: int, node: FsmState) -> Tuple[float, float]:
        g = self.index(u, node)
        return float(self.reward[g]), float(self.cost[g])


def fsm_closed_form(
    model: PomdpModel,
    fsm: FsmActions,
    step: Callable[[FsmState, Optional[int]], FsmState] = fsm_step,
) -> FsmAnalysis:
    """Expected episode reward and cost from every (u, I, action) via one sparse solve."""
    nodes = fsm.nodes(0) + fsm.nodes(1)
    position = {node: i for i, node in enumerate(nodes)}
    n = model.n_states
    grid = [[None] * len(nodes) for _ in nodes]
    reward = np.zeros(len(nodes) * n)
    cost = np.zeros(len(nodes) * n)
    for i, node in enumerate(nodes):
        spec = fsm.spec(node)
        action = model.slice_for(node.bs, spec)
        reward[i * n:(i + 1) * n] = action.reward
        cost[i * n:(i + 1) * n] = action.cost
        for y, block in enumerate(action.blocks):
            target = step(node, spec.observation_label(y))
            j = position[target]
            grid[i][j] = block if grid[i][j] is None else grid[i][j] + block
    for i in range(len(nodes)):
        if grid[i][i] is None:
            grid[i][i] = sp.csr_matrix((n, n))
    chain = sp.bmat(grid, format="csc")
    system = sp.identity(chain.shape[0], format="csc") - chain
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            solution = spla.spsolve(system, np.column_stack([reward, cost]))
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise SingularSystem("FSM chain has no exit mass", detail=str(exc)) from exc
    solution = np.asarray(solution).reshape(len(reward), 2)
    if not np.all(np.isfinite(solution)):
        raise SingularSystem("FSM chain has no exit mass")
    return FsmAnalysis(nodes, n, solution[:, 0], solution[:, 1])


# ── Policies ──────────────────────────────────────────────────────────────────
class Policy:
    name = "policy"
    tracks_belief = False

    def reset(self, bs_index: int) -> None:
        pass

    def act(self, bs_index: int, belief: Optional[np.ndarray], true_state: Optional[TrueState]) -> ActionSpec:
        raise NotImplementedError

    def observe(self, spec: ActionSpec, y: Optional[int], next_bs: int) -> None:
        pass


class FsmPolicy(Policy):
    name = "fsm"

    def __init__(self, fsm: FsmActions, step=fsm_step):
        self.fsm = fsm
        self.step = step
        self.state: Optional[FsmState] = None

    def reset(self, bs_index: int) -> None:
        self.state = FsmState(ActionKind.BT, bs_index)

    def act(self, bs_index, belief, true_state) -> ActionSpec:
        return self.fsm.spec(self.state)

    def observe(self, spec, y, next_bs) -> None:
        self.state = self.step(self.state, y)


class BaselinePolicy(FsmPolicy):
    name = "baseline"

    def __init__(self, fsm: FsmActions):
        super().__init__(fsm, baseline_step)


@dataclass(frozen=True)
class BheuParams:
    thresholds: Tuple[float, float, float]
    snr: Tuple[float, float]
    dt_duration: int
    ho_duration: int = 1

    def __post_init__(self):
        if len(self.thresholds) != 3 or any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ValueError("B-HEU thresholds must lie in (0, 1)")


def belief_marginals(belief: np.ndarray, bs_index: int, model: PomdpModel, sbpi_set: Sequence[int]):
    """(Λ_I, Ξ_I): unblocked probability and per-beam occupancy given no blockage."""
    up = model.unblocked[bs_index] == 1
    serving = model.serving_bpi[bs_index]
    mass = np.array([float(belief[up & (serving == j)].sum()) for j in sbpi_set])
    total = float(mass.sum())
    xi = mass / total if total > 0.0 else np.zeros_like(mass)
    return total, xi


def smallest_cover(xi: np.ndarray, target: float) -> List[int]:
    """Positions of the fewest beams whose Ξ sums to ``target`` (greedy by descending Ξ)."""
    order = sorted(range(len(xi)), key=lambda i: (-xi[i], i))
    chosen, acc = [], 0.0
    for i in order:
        chosen.append(i)
        acc += xi[i]
        if acc >= target - 1e-12:
            break
    return sorted(chosen)


def bheu_action(
    belief: np.ndarray,
    bs_index: int,
    params: BheuParams,
    model: PomdpModel,
    sbpi_set: Sequence[int],
) -> ActionSpec:
    eta1, eta2, eta3 = params.thresholds
    total = float(belief.sum())
    belief = belief / total if total > 0.0 else belief
    unblocked, xi = belief_marginals(belief, bs_index, model, sbpi_set)
    if unblocked < eta1 or unblocked == 0.0:
        return ActionSpec.handover(params.ho_duration)
    best = int(np.argmax(xi))
    snr = params.snr[bs_index]
    if xi[best] >= eta2:
        return ActionSpec.transmission(sbpi_set[best], snr, params.dt_duration)
    scan = [sbpi_set[i] for i in smallest_cover(xi, eta3)]
    return ActionSpec.training(scan, snr)


class BheuPolicy(Policy):
    name = "bheu"
    tracks_belief = True

    def __init__(self, params: BheuParams, model: PomdpModel, sbpi_sets: Sequence[Sequence[int]]):
        self.params = params
        self.model = model
        self.sbpi_sets = [list(s) for s in sbpi_sets]

    def act(self, bs_index, belief, true_state) -> ActionSpec:
        return bheu_action(belief, bs_index, self.params, self.model, self.sbpi_sets[bs_index])


class CpbviPolicy(Policy):
    name = "cpbvi"
    tracks_belief = True

    def __init__(self, artifact: PolicyArtifact):
        self.artifact = artifact

    def act(self, bs_index, belief, true_state) -> ActionSpec:
        spec, _, _ = policy_action(belief, bs_index, self.artifact)
        return spec


class GeniePolicy(Policy):
    """Knows the true state: hands over as soon as the serving link is blocked and the other is not.

    With both links blocked it stays on the serving BS and keeps transmitting on its true BPI.
    Those slots earn nothing but are still charged transmit energy, so the genie bounds spectral
    efficiency, not power.
    """
    name = "genie"

    def __init__(self, snr: Tuple[float, float], dt_duration: int, ho_duration: int = 1):
        self.snr = snr
        self.dt_duration = dt_duration
        self.ho_duration = ho_duration

    def act(self, bs_index, belief, true_state: TrueState) -> ActionSpec:
        other = 1 - bs_index
        if not true_state.unblocked[bs_index] and true_state.unblocked[other]:
            return ActionSpec.handover(self.ho_duration)
        return ActionSpec.transmission(true_state.pair[bs_index], self.snr[bs_index], self.dt_duration)


def fsm_summary(analysis: FsmAnalysis, u0: int, bs_index: int, duration: float, bandwidth: float) -> Dict[str, float]:
    reward, cost = analysis.totals(u0, FsmState(ActionKind.BT, bs_index))
    return {
        "reward_bits": reward,
        "energy_j": cost,
        "duration_s": duration,
        "spectral_efficiency": reward / duration / bandwidth,
        "power_w": cost / duration,
    }
