"""Constrained POMDP over the joint SBPI/blockage state.

For every serving BS ``I`` and action ``a`` an :class:`ActionSlice` holds one
sparse block per observation, ``blocks[y][u, u'] = P(u', y | u, I, a)``, with
observation 0 meaning "no beam reported" and observation ``1 + i`` meaning the
``i``-th beam of the action. Whatever row mass is missing is the episode exit.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from codebook import SectoredCalibration
from dynamics import EXIT, JointTransitionModel
from errors import EmptyCoverage, ImpossibleObservation
from link_phases import (
    bt_outcome_distribution,
    dt_feedback_distribution,
    optimal_outage_target,
    solve_bt_threshold,
    solve_dt_threshold,
)
from schemas import ExperimentConfig

logger = logging.getLogger(__name__)

NORMALIZER_FLOOR = 1e-300


class ActionKind(str, Enum):
    BT = "BT"
    DT = "DT"
    HO = "HO"


@dataclass(frozen=True)
class ActionSpec:
    kind: ActionKind
    beams: Tuple[int, ...] = ()
    snr: float = 0.0
    duration: int = 1

    def __post_init__(self):
        if self.kind == ActionKind.HO:
            if self.beams or self.snr != 0.0 or self.duration < 1:
                raise ValueError("HO carries no beams, zero SNR and a positive duration")
        elif self.kind == ActionKind.BT:
            if not self.beams or self.duration != len(self.beams) + 1:
                raise ValueError("BT duration is one slot per scanned beam plus feedback")
        elif len(self.beams) != 1 or self.duration < 2:
            raise ValueError("DT uses one beam for at least two slots")
        if self.kind != ActionKind.HO and self.snr <= 0.0:
            raise ValueError("BT/DT target SNR must be positive")

    @classmethod
    def handover(cls, duration: int = 1) -> "ActionSpec":
        return cls(ActionKind.HO, (), 0.0, duration)

    @classmethod
    def training(cls, beams: Sequence[int], snr: float) -> "ActionSpec":
        beams = tuple(int(j) for j in beams)
        return cls(ActionKind.BT, beams, float(snr), len(beams) + 1)

    @classmethod
    def transmission(cls, beam: int, snr: float, duration: int) -> "ActionSpec":
        return cls(ActionKind.DT, (int(beam),), float(snr), int(duration))

    @property
    def n_observations(self) -> int:
        return 1 + len(self.beams)

    def observation_label(self, y: int) -> Optional[int]:
        """BPI reported by observation ``y``; ``None`` for the empty feedback."""
        return None if y == 0 else self.beams[y - 1]

    def observation_index(self, beam: Optional[int]) -> int:
        return 0 if beam is None else 1 + self.beams.index(beam)

    @property
    def label(self) -> str:
        if self.kind == ActionKind.HO:
            return "HO"
        beams = ",".join(str(j) for j in self.beams)
        snr_db = 10.0 * math.log10(self.snr)
        if self.kind == ActionKind.BT:
            return f"BT[{beams}]@{snr_db:.1f}dB"
        return f"DT[{beams}]x{self.duration}@{snr_db:.1f}dB"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "beams": list(self.beams), "snr": self.snr, "duration": self.duration}

    @classmethod
    def from_dict(cls, data: dict) -> "ActionSpec":
        return cls(ActionKind(data["kind"]), tuple(int(j) for j in data["beams"]),
                   float(data["snr"]), int(data["duration"]))


def next_serving_bs(spec: ActionSpec, bs_index: int) -> int:
    return 1 - bs_index if spec.kind == ActionKind.HO else bs_index


def bt_windows(sbpi_set: Sequence[int], sizes: Sequence[int]) -> List[Tuple[int, ...]]:
    """Full set first, then every contiguous window of each size in SBPI order."""
    full = tuple(sbpi_set)
    subsets = [full]
    for size in sizes:
        if size < 1 or size >= len(full):
            continue
        for start in range(len(full) - size + 1):
            window = full[start:start + size]
            if window not in subsets:
                subsets.append(window)
    return subsets


def enumerate_actions(
    sbpi_set: Sequence[int],
    snr_grid: Sequence[float],
    dt_durations: Sequence[int],
    bt_window_sizes: Sequence[int] = (),
    ho_duration: int = 1,
) -> List[ActionSpec]:
    if not sbpi_set:
        raise EmptyCoverage("serving BS has no strongest beam pairs")
    if not snr_grid or not dt_durations:
        raise ValueError("SNR and DT-duration grids must not be empty")
    actions = [ActionSpec.handover(ho_duration)]
    for beams in bt_windows(sbpi_set, bt_window_sizes):
        actions.extend(ActionSpec.training(beams, snr) for snr in snr_grid)
    for j in sbpi_set:
        for snr in snr_grid:
            actions.extend(ActionSpec.transmission(j, snr, t) for t in dt_durations)
    return actions


# ── Slices ────────────────────────────────────────────────────────────────────
@dataclass
class ActionSlice:
    spec: ActionSpec
    blocks: List[sp.csr_matrix]
    reward: np.ndarray
    cost: np.ndarray
    next_bs: int
    eta: Optional[float] = None
    _stacked: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def exit(self) -> np.ndarray:
        mass = sum(np.asarray(b.sum(axis=1)).ravel() for b in self.blocks)
        return np.clip(1.0 - mass, 0.0, 1.0)

    @property
    def stacked(self) -> sp.csr_matrix:
        """All blocks side by side; column ``y*|U| + u'``."""
        if self._stacked is None:
            self._stacked = sp.hstack(self.blocks, format="csr")
        return self._stacked

    def row_mass_error(self) -> float:
        mass = sum(np.asarray(b.sum(axis=1)).ravel() for b in self.blocks)
        return float(np.max(np.maximum(mass - 1.0, 0.0))) if mass.size else 0.0

    @classmethod
    def from_dense(cls, spec, tensor, reward, cost, next_bs, eta=None) -> "ActionSlice":
        """``tensor[u, y, u']``; used for hand-built toy models."""
        tensor = np.asarray(tensor, dtype=float)
        blocks = [sp.csr_matrix(tensor[:, y, :]) for y in range(tensor.shape[1])]
        n = tensor.shape[0]
        reward = np.broadcast_to(np.asarray(reward, dtype=float), (n,)).copy()
        cost = np.broadcast_to(np.asarray(cost, dtype=float), (n,)).copy()
        return cls(spec, blocks, reward, cost, next_bs, eta)

    def to_dict(self) -> dict:
        triplets = []
        for block in self.blocks:
            coo = block.tocoo()
            order = np.lexsort((coo.col, coo.row))
            triplets.append([[int(coo.row[i]), int(coo.col[i]), float(coo.data[i])] for i in order])
        return {
            "spec": self.spec.to_dict(),
            "next_bs": self.next_bs,
            "eta": self.eta,
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "exit": self.exit.tolist(),
            "triplets": triplets,
        }

    @classmethod
    def from_dict(cls, data: dict, n_states: int) -> "ActionSlice":
        blocks = []
        for trip in data["triplets"]:
            arr = np.array(trip, dtype=float).reshape(-1, 3)
            blocks.append(sp.csr_matrix(
                (arr[:, 2], (arr[:, 0].astype(int), arr[:, 1].astype(int))), shape=(n_states, n_states)
            ))
        return cls(
            ActionSpec.from_dict(data["spec"]), blocks,
            np.asarray(data["reward"], dtype=float), np.asarray(data["cost"], dtype=float),
            int(data["next_bs"]), data.get("eta"),
        )


def observation_probabilities(belief: np.ndarray, action: ActionSlice) -> np.ndarray:
    """``[P(y=0), ..., P(y=Y-1), P(exit)]`` under the belief."""
    probs = [float((belief @ block).sum()) for block in action.blocks]
    probs.append(float(belief @ action.exit))
    return np.array(probs)


def belief_update(belief: np.ndarray, action: ActionSlice, y: int) -> Optional[np.ndarray]:
    """Bayes rule; ``None`` when the episode terminated."""
    if y == EXIT:
        return None
    unnormalized = belief @ action.blocks[y]
    total = float(unnormalized.sum())
    if total < NORMALIZER_FLOOR:
        raise ImpossibleObservation(
            "observation has zero probability under the current belief",
            action=action.spec.label, observation=int(y),
        )
    return np.asarray(unnormalized / total).ravel()


def predict_belief(belief: np.ndarray, action: ActionSlice) -> Optional[np.ndarray]:
    """Belief propagated through the action ignoring its feedback."""
    prior = sum(belief @ block for block in action.blocks)
    total = float(np.sum(prior))
    if total < NORMALIZER_FLOOR:
        return None
    return np.asarray(prior / total).ravel()


def sample_outcome(action: ActionSlice, u: int, rng: np.random.Generator) -> Tuple[int, Optional[int]]:
    """Draw ``(y, u')`` from row ``u``; ``(EXIT, None)`` when the UE leaves."""
    stacked = action.stacked
    start, stop = stacked.indptr[u], stacked.indptr[u + 1]
    data = stacked.data[start:stop]
    cum = np.cumsum(data)
    stay = cum[-1] if cum.size else 0.0
    total = stay + max(1.0 - stay, 0.0)
    draw = rng.random() * total
    if draw >= stay:
        return EXIT, None
    pos = min(int(np.searchsorted(cum, draw, side="right")), cum.size - 1)
    y, u_next = divmod(int(stacked.indices[start + pos]), action.n_states)
    return y, u_next


# ── Models ────────────────────────────────────────────────────────────────────
class PomdpModel:
    """Per-BS action lists plus slice access; subclasses decide how slices are made."""

    n_states: int
    actions: List[List[ActionSpec]]
    # state structure used by belief seeding and B-HEU; None for unstructured toys
    unblocked: Optional[np.ndarray] = None
    serving_bpi: Optional[np.ndarray] = None
    pair_of_state: Optional[np.ndarray] = None

    def slice_for(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        raise NotImplementedError

    def slice(self, bs_index: int, action_index: int) -> ActionSlice:
        return self.slice_for(bs_index, self.actions[bs_index][action_index])

    def action_index(self, bs_index: int, spec: ActionSpec) -> int:
        return self.actions[bs_index].index(spec)

    def handover_index(self, bs_index: int) -> int:
        for i, spec in enumerate(self.actions[bs_index]):
            if spec.kind == ActionKind.HO:
                return i
        return 0

    def point_belief(self, u: int) -> np.ndarray:
        belief = np.zeros(self.n_states)
        belief[u] = 1.0
        return belief


class TabularModel(PomdpModel):
    """Model with every slice given up front (toys and loaded artifacts)."""

    def __init__(self, n_states: int, slices: Sequence[Sequence[ActionSlice]], metadata: Optional[dict] = None):
        self.n_states = n_states
        self._slices = [list(s) for s in slices]
        self._lookup: List[Dict[ActionSpec, ActionSlice]] = [{s.spec: s for s in per_bs} for per_bs in self._slices]
        self.actions = [[s.spec for s in per_bs] for per_bs in self._slices]
        self.metadata = dict(metadata or {})
        if "pairs" in self.metadata:
            u = np.arange(n_states)
            pairs = self.metadata["pairs"]
            self.pair_of_state = u // 4
            self.unblocked = np.stack([(u % 4) // 2, u % 2])
            self.serving_bpi = np.array([[pairs[s][i] for s in self.pair_of_state] for i in (0, 1)])

    def slice_for(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        try:
            return self._lookup[bs_index][spec]
        except KeyError:
            raise ValueError(f"action {spec.label} is not part of the tabulated model") from None

    def slice(self, bs_index: int, action_index: int) -> ActionSlice:
        return self._slices[bs_index][action_index]

    @classmethod
    def from_dict(cls, data: dict) -> "TabularModel":
        n = int(data["n_states"])
        slices = [[ActionSlice.from_dict(s, n) for s in per_bs] for per_bs in data["slices"]]
        return cls(n, slices, data.get("metadata"))


@dataclass(frozen=True)
class LinkParams:
    noise_power: float
    symbols: float
    pilot_fraction: float
    bandwidth: float
    slot_duration: float

    @classmethod
    def from_config(cls, config: ExperimentConfig, noise_power: float) -> "LinkParams":
        return cls(noise_power, config.symbols_per_slot, config.link.pilot_fraction,
                   config.channel.bandwidth, config.link.slot_duration)


class LinkModel(PomdpModel):
    """Slices assembled from the joint chain and the sectored link statistics.

    Slices are built the first time they are requested and cached per
    ``(bs, spec)``, so actions outside the enumerated lists (B-HEU partial
    scans) are available as well.
    """

    def __init__(
        self,
        joint: JointTransitionModel,
        calibrations: Sequence[SectoredCalibration],
        params: LinkParams,
        actions: Sequence[Sequence[ActionSpec]],
    ):
        self.joint = joint
        self.calibrations = list(calibrations)
        self.params = params
        self.actions = [list(a) for a in actions]
        self.n_states = joint.n_states
        self.unblocked = joint.unblocked
        self.serving_bpi = joint.serving_bpi
        self.pair_of_state = joint.pair_of_state
        self._cache: Dict[Tuple[int, ActionSpec], ActionSlice] = {}
        self._thresholds: Dict[tuple, float] = {}

    def slice_for(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        key = (bs_index, spec)
        if key not in self._cache:
            builder = {
                ActionKind.HO: self._handover,
                ActionKind.BT: self._training,
                ActionKind.DT: self._transmission,
            }[spec.kind]
            self._cache[key] = builder(bs_index, spec)
        return self._cache[key]

    def _rho(self, bs_index: int) -> float:
        return self.calibrations[bs_index].rho_model

    def threshold(self, bs_index: int, kind: ActionKind, snr: float, n_beams: int) -> float:
        key = (bs_index, kind, snr, n_beams)
        if key not in self._thresholds:
            p = self.params
            if kind == ActionKind.BT:
                thr = solve_bt_threshold(snr, n_beams, p.symbols, self._rho(bs_index))
            else:
                thr = solve_dt_threshold(snr, p.pilot_fraction, p.symbols, self._rho(bs_index))
            self._thresholds[key] = thr.eta
        return self._thresholds[key]

    def slot_energy(self, bs_index: int, beam: int, snr: float) -> float:
        cal = self.calibrations[bs_index]
        return self.params.slot_duration * self.params.noise_power * snr / (cal.upsilon[beam] + cal.diffuse_variance)

    def energy_cost(self, bs_index: int, spec: ActionSpec) -> float:
        """(T - 1)·Δt/|S| · Σ_j P_j; zero for HO."""
        if spec.kind == ActionKind.HO:
            return 0.0
        per_slot = sum(self.slot_energy(bs_index, j, spec.snr) for j in spec.beams)
        return (spec.duration - 1) * per_slot / len(spec.beams)

    def _aligned(self, bs_index: int, beam: int) -> np.ndarray:
        return (self.serving_bpi[bs_index] == beam) & (self.unblocked[bs_index] == 1)

    def _handover(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        n = self.n_states
        return ActionSlice(spec, [self.joint.power(spec.duration)], np.zeros(n), np.zeros(n),
                           next_serving_bs(spec, bs_index))

    def _training(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        p = self.params
        beams = spec.beams
        eta = self.threshold(bs_index, ActionKind.BT, spec.snr, len(beams))
        rho = self._rho(bs_index)
        active = bt_outcome_distribution(len(beams), spec.snr, p.symbols, eta, rho, True)
        idle = bt_outcome_distribution(len(beams), spec.snr, p.symbols, eta, rho, False)

        # feedback depends on the state at the start of the scan
        feedback = np.tile(idle.vector(None), (self.n_states, 1))
        serving = self.serving_bpi[bs_index]
        up = self.unblocked[bs_index] == 1
        for pos, j in enumerate(beams):
            rows = up & (serving == j)
            feedback[rows] = active.vector(pos)
        transition = self.joint.power(spec.duration)
        blocks = [(sp.diags(feedback[:, y]) @ transition).tocsr() for y in range(spec.n_observations)]
        n = self.n_states
        return ActionSlice(spec, blocks, np.zeros(n), np.full(n, self.energy_cost(bs_index, spec)), bs_index, eta)

    def _transmission(self, bs_index: int, spec: ActionSpec) -> ActionSlice:
        p = self.params
        beam = spec.beams[0]
        eta = self.threshold(bs_index, ActionKind.DT, spec.snr, 1)
        rho = self._rho(bs_index)
        aligned = self._aligned(bs_index, beam)
        on = dt_feedback_distribution(spec.snr, p.pilot_fraction, p.symbols, eta, rho, True)
        off = dt_feedback_distribution(spec.snr, p.pilot_fraction, p.symbols, eta, rho, False)
        feedback = np.where(aligned[:, None], on[None, :], off[None, :])

        # feedback is generated in the second-to-last slot, two transitions before the end
        before = self.joint.power(spec.duration - 2)
        after = self.joint.power(2)
        blocks = [(before @ sp.diags(feedback[:, y]) @ after).tocsr() for y in range(2)]
        for block in blocks:
            block.eliminate_zeros()

        # expected aligned slots over the T - 1 data slots
        indicator = aligned.astype(float)
        visits = indicator.copy()
        current = indicator
        for _ in range(spec.duration - 2):
            current = self.joint.one_step @ current
            visits += current
        _, per_second = optimal_outage_target(spec.snr, p.pilot_fraction, p.bandwidth)
        reward = per_second * p.slot_duration * visits
        cost = np.full(self.n_states, self.energy_cost(bs_index, spec))
        return ActionSlice(spec, blocks, reward, cost, bs_index, eta)

    def export(self) -> dict:
        """Every enumerated slice as sparse triplets, in action order."""
        slices = []
        for bs_index, specs in enumerate(self.actions):
            slices.append([self.slice_for(bs_index, spec).to_dict() for spec in specs])
        return {
            "n_states": self.n_states,
            "metadata": {
                "pairs": [list(p) for p in self.joint.pairs],
                "initial_state": self.joint.initial_state(),
                "expected_duration": self.joint.expected_duration(),
                "slot_duration": self.params.slot_duration,
                "bandwidth": self.params.bandwidth,
            },
            "slices": slices,
        }


def build_action_lists(sbpi_sets: Sequence[Sequence[int]], config: ExperimentConfig, array_gain_peak: Sequence[float]):
    """Per-BS action lists from the configured grids; SNR = SNR_pre·M_tx·M_rx."""
    grid = config.actions
    lists = []
    for bs_index, sbpi in enumerate(sbpi_sets):
        snrs = [10.0 ** (v / 10.0) * array_gain_peak[bs_index] for v in grid.snr_pre_db]
        lists.append(enumerate_actions(sbpi, snrs, grid.dt_durations, grid.bt_window_sizes,
                                       config.link.ho_duration))
        logger.info("BS %d: %d actions", bs_index, len(lists[-1]))
    return lists
