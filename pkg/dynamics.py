"""UE mobility, blockage chains and the joint SBPI-pair/blockage Markov model.

Joint state index: ``u = 4*s + 2*b0 + b1`` where ``s`` indexes the visited
SBPI pair and ``b_I = 1`` means the LOS path to BS I is unblocked.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from tqdm import tqdm

from schemas import ExperimentConfig

logger = logging.getLogger(__name__)

EXIT = -1


# ── Mobility ──────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class MobilityParams:
    mean_speed: float
    speed_std: float
    memory: float
    slot_duration: float
    lane_change_prob: float

    def __post_init__(self):
        if not 0.0 <= self.memory <= 1.0:
            raise ValueError("mobility memory must lie in [0, 1]")
        if self.slot_duration <= 0.0:
            raise ValueError("slot duration must be positive")
        if not 0.0 <= self.lane_change_prob <= 1.0:
            raise ValueError("lane-change probability must lie in [0, 1]")

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "MobilityParams":
        m = config.mobility
        return cls(m.mean_speed, m.speed_std, m.memory, config.link.slot_duration, m.lane_change_prob)


@dataclass(frozen=True)
class MobilityState:
    speed: float
    y: float
    lane: int


def _next_speed(speed, params: MobilityParams, noise):
    g = params.memory
    v = g * speed + (1.0 - g) * params.mean_speed + params.speed_std * np.sqrt(1.0 - g * g) * noise
    return np.maximum(v, 0.0)


def _next_lane(lane, lane_count: int, flip, step):
    if lane_count == 1:
        return lane
    if lane_count == 2:
        return np.where(flip, 1 - lane, lane)
    moved = np.clip(lane + step, 0, lane_count - 1)
    # bounce off the outer lanes
    moved = np.where(moved == lane, lane - step, moved)
    return np.where(flip, moved, lane)


def mobility_step(
    state: MobilityState,
    params: MobilityParams,
    segment_length: float,
    lane_count: int,
    rng: np.random.Generator,
) -> Optional[MobilityState]:
    """One Gauss-Markov slot; ``None`` once the UE leaves the segment."""
    noise = rng.standard_normal()
    speed = float(_next_speed(state.speed, params, noise))
    y = state.y + params.slot_duration * state.speed
    lane = state.lane
    if lane_count > 1:
        flip = rng.random() < params.lane_change_prob
        step = 1 if rng.random() < 0.5 else -1
        lane = int(_next_lane(lane, lane_count, flip, step))
    if y < 0.0 or y > segment_length:
        return None
    return MobilityState(speed, y, lane)


# ── Blockage ──────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class BlockageParams:
    steady_state_prob: Tuple[float, float]
    mean_duration: Tuple[float, float]

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "BlockageParams":
        b = config.blockage
        return cls(tuple(b.steady_state_prob), tuple(b.mean_duration))


def blockage_chain(params: BlockageParams, slot_duration: float) -> List[Tuple[float, float]]:
    """(B01, B10) per BS: blocked->unblocked and unblocked->blocked per slot."""
    rates = []
    for pi0, d0 in zip(params.steady_state_prob, params.mean_duration):
        if d0 < slot_duration:
            raise ValueError("mean blockage duration shorter than a slot")
        if not 0.0 <= pi0 < 1.0:
            raise ValueError("steady-state blockage probability must lie in [0, 1)")
        b01 = slot_duration / d0
        rates.append((b01, pi0 / (1.0 - pi0) * b01))
    return rates


def blockage_matrix(b01: float, b10: float) -> np.ndarray:
    """Rows/columns ordered (blocked, unblocked)."""
    return np.array([[1.0 - b01, b01], [b10, 1.0 - b10]])


def blockage_step(bits: np.ndarray, rates: Sequence[Tuple[float, float]], rng: np.random.Generator) -> np.ndarray:
    draws = rng.random(len(rates))
    out = bits.copy()
    for i, (b01, b10) in enumerate(rates):
        if bits[i] == 0:
            out[i] = 1 if draws[i] < b01 else 0
        else:
            out[i] = 0 if draws[i] < b10 else 1
    return out


# ── Estimation ────────────────────────────────────────────────────────────────
@dataclass
class TransitionEstimate:
    sbpi: sp.csr_matrix
    exit: np.ndarray
    visits: np.ndarray
    blockage: Dict[Tuple[int, int], np.ndarray]
    zero_rows: List[int]
    undefined_blockage_rows: List[Tuple[int, int, int]]


def estimate_transitions(s, b, s_next, b_next, n_states: Optional[int] = None) -> TransitionEstimate:
    """Count-ratio estimates of S_{s'|s} and B_{b'|b s s'}.

    ``s_next == EXIT`` marks the UE leaving; such samples enlarge the row
    denominator only, so row deficits equal the empirical exit frequency.
    """
    s = np.asarray(s, dtype=int)
    s_next = np.asarray(s_next, dtype=int)
    if s.size == 0:
        raise ValueError("empty transition series")
    if n_states is None:
        n_states = int(max(s.max(), s_next.max())) + 1

    visits = np.bincount(s, minlength=n_states).astype(float)
    stay = s_next != EXIT
    counts = sp.coo_matrix(
        (np.ones(int(stay.sum())), (s[stay], s_next[stay])), shape=(n_states, n_states)
    ).tocsr()
    counts.sum_duplicates()
    safe = np.where(visits > 0, visits, 1.0)
    sbpi = sp.diags(1.0 / safe) @ counts
    exit_counts = np.bincount(s[~stay], minlength=n_states).astype(float)
    zero_rows = [int(i) for i in np.flatnonzero(visits == 0)]
    if zero_rows:
        logger.warning("%d SBPI-pair rows have no visits", len(zero_rows))

    blockage, undefined = {}, []
    if b is not None:
        b = np.asarray(b, dtype=int)
        b_next = np.asarray(b_next, dtype=int)
        table: Dict[Tuple[int, int], np.ndarray] = {}
        for key, cnt in Counter(zip(s[stay], s_next[stay], b[stay], b_next[stay])).items():
            src, dst, bb, bn = key
            table.setdefault((src, dst), np.zeros((4, 4)))[bb, bn] += cnt
        for key in sorted(table):
            mat = table[key]
            totals = mat.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                blockage[key] = np.where(totals > 0, mat / np.where(totals > 0, totals, 1.0), np.nan)
            undefined.extend((key[0], key[1], int(r)) for r in np.flatnonzero(totals[:, 0] == 0))
    return TransitionEstimate(sbpi.tocsr(), exit_counts / safe, visits, blockage, zero_rows, undefined)


def multi_step(one_step: sp.csr_matrix, steps: int, cache: Optional[Dict[int, sp.csr_matrix]] = None) -> sp.csr_matrix:
    """P(T) = P(T-1)·P, memoized in ``cache``; P(0) is the identity."""
    if steps < 0:
        raise ValueError("number of steps must be nonnegative")
    cache = {} if cache is None else cache
    if steps == 0:
        return sp.identity(one_step.shape[0], format="csr")
    if steps in cache:
        return cache[steps]
    known = [t for t in cache if t < steps]
    t = max(known) if known else 1
    current = cache.get(t, one_step.tocsr())
    cache.setdefault(1, one_step.tocsr())
    while t < steps:
        current = (current @ one_step).tocsr()
        current.eliminate_zeros()
        t += 1
        cache[t] = current
    return current


# ── Joint model ───────────────────────────────────────────────────────────────
class JointTransitionModel:
    """Substochastic one-step chain on U = S x {0,1}^2 with cached powers."""

    def __init__(
        self,
        pairs: Sequence[Tuple[int, int]],
        sbpi_matrix: sp.spmatrix,
        blockage: Sequence[np.ndarray],
        slot_duration: float,
        mean_episode_slots: Optional[float] = None,
        entry_pair: Optional[Tuple[int, int]] = None,
        zero_rows: Sequence[int] = (),
    ):
        self.pairs = [tuple(int(x) for x in p) for p in pairs]
        self.sbpi_matrix = sp.csr_matrix(sbpi_matrix)
        self.blockage = [np.asarray(m, dtype=float) for m in blockage]
        self.slot_duration = slot_duration
        self.mean_episode_slots = mean_episode_slots
        self.entry_pair = tuple(entry_pair) if entry_pair is not None else self.pairs[0]
        self.zero_rows = list(zero_rows)
        self._index = {p: i for i, p in enumerate(self.pairs)}
        joint_blockage = sp.csr_matrix(np.kron(self.blockage[0], self.blockage[1]))
        self.one_step = sp.kron(self.sbpi_matrix, joint_blockage, format="csr")
        self.one_step.eliminate_zeros()
        self._powers: Dict[int, sp.csr_matrix] = {1: self.one_step}

        u = np.arange(self.n_states)
        self.pair_of_state = u // 4
        self.unblocked = np.stack([(u % 4) // 2, u % 2])
        self.serving_bpi = np.array([[self.pairs[s][i] for s in self.pair_of_state] for i in (0, 1)])

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_states(self) -> int:
        return 4 * len(self.pairs)

    def state_index(self, pair: Tuple[int, int], b0: int, b1: int) -> int:
        return 4 * self._index[tuple(pair)] + 2 * int(b0) + int(b1)

    def has_pair(self, pair: Tuple[int, int]) -> bool:
        return tuple(pair) in self._index

    def decode(self, u: int) -> Tuple[Tuple[int, int], int, int]:
        return self.pairs[u // 4], (u % 4) // 2, u % 2

    def power(self, steps: int) -> sp.csr_matrix:
        return multi_step(self.one_step, steps, self._powers)

    @property
    def exit_probability(self) -> np.ndarray:
        return 1.0 - np.asarray(self.one_step.sum(axis=1)).ravel()

    def initial_state(self) -> int:
        return self.state_index(self.entry_pair, 1, 1)

    def expected_slots(self) -> np.ndarray:
        """Expected slots to absorption from every state, (I - P)^-1·1."""
        system = sp.identity(self.n_states, format="csc") - self.one_step.tocsc()
        return spla.spsolve(system, np.ones(self.n_states))

    def expected_duration(self, u0: Optional[int] = None) -> float:
        u0 = self.initial_state() if u0 is None else u0
        return float(self.expected_slots()[u0]) * self.slot_duration

    def to_dict(self) -> dict:
        coo = self.sbpi_matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return {
            "pairs": [list(p) for p in self.pairs],
            "sbpi_triplets": [[int(coo.row[i]), int(coo.col[i]), float(coo.data[i])] for i in order],
            "blockage": [m.tolist() for m in self.blockage],
            "slot_duration": self.slot_duration,
            "mean_episode_slots": self.mean_episode_slots,
            "entry_pair": list(self.entry_pair),
            "zero_rows": list(self.zero_rows),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JointTransitionModel":
        n = len(data["pairs"])
        trip = np.array(data["sbpi_triplets"], dtype=float).reshape(-1, 3)
        matrix = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(n, n))
        return cls(
            data["pairs"], matrix, data["blockage"], data["slot_duration"],
            data.get("mean_episode_slots"), data.get("entry_pair"), data.get("zero_rows", ()),
        )


def _default_horizon(params: MobilityParams, segment_length: float) -> int:
    if params.mean_speed <= 0.0:
        return 1000
    return int(20.0 * segment_length / (params.mean_speed * params.slot_duration)) + 1000


def simulate_pair_transitions(
    params: MobilityParams,
    segment_length: float,
    lane_count: int,
    table,
    n_trajectories: int,
    rng: np.random.Generator,
    start_y: float = 0.0,
    max_slots: Optional[int] = None,
    progress: bool = False,
) -> Tuple[Counter, np.ndarray, Counter]:
    """Vectorized trajectory simulation returning pair-transition counts.

    Keys are ``(pair, next_pair)`` with ``next_pair = None`` on exit. Also
    returns per-trajectory slot counts and the entry-pair histogram.
    """
    n = n_trajectories
    horizon = max_slots or _default_horizon(params, segment_length)
    speed = np.full(n, params.mean_speed)
    y = np.full(n, float(start_y))
    lane = rng.integers(lane_count, size=n)
    p0, p1 = table.pair(y, lane)
    stride = int(table.table.max()) + 2
    code = p0 * stride + p1
    entries = Counter(zip(p0.tolist(), p1.tolist()))
    durations = np.zeros(n, dtype=int)
    alive = np.arange(n)
    counts: Counter = Counter()
    buffer: List[np.ndarray] = []
    buffered = 0
    exit_code = stride * stride

    def flush():
        nonlocal buffer, buffered
        if buffer:
            keys, freq = np.unique(np.concatenate(buffer), return_counts=True)
            counts.update(dict(zip(keys.tolist(), freq.tolist())))
        buffer, buffered = [], 0

    bar = tqdm(total=n, desc="trajectories", disable=not progress, leave=False)
    for _ in range(horizon):
        if alive.size == 0:
            break
        m = alive.size
        noise = rng.standard_normal(m)
        flips = rng.random(m) < params.lane_change_prob
        steps = np.where(rng.random(m) < 0.5, 1, -1)
        y_next = y[alive] + params.slot_duration * speed[alive]
        speed[alive] = _next_speed(speed[alive], params, noise)
        lane[alive] = _next_lane(lane[alive], lane_count, flips, steps)
        y[alive] = y_next
        durations[alive] += 1

        gone = (y_next < 0.0) | (y_next > segment_length)
        q0, q1 = table.pair(y_next, lane[alive])
        next_code = np.where(gone, exit_code, q0 * stride + q1)
        buffer.append(code[alive] * (exit_code + 1) + next_code)
        buffered += m
        code[alive] = np.where(gone, code[alive], next_code)
        if gone.any():
            bar.update(int(gone.sum()))
            alive = alive[~gone]
        if buffered > 2_000_000:
            flush()
    flush()
    bar.close()
    if alive.size:
        logger.warning("%d trajectories truncated at %d slots", alive.size, horizon)

    transitions: Counter = Counter()
    for key, cnt in counts.items():
        src, dst = divmod(key, exit_code + 1)
        src_pair = divmod(src, stride)
        dst_pair = None if dst == exit_code else divmod(dst, stride)
        transitions[(src_pair, dst_pair)] += cnt
    return transitions, durations, entries


def joint_model_from_samples(
    params: MobilityParams,
    blockage: BlockageParams,
    segment_length: float,
    lane_count: int,
    table,
    n_trajectories: int,
    rng: np.random.Generator,
    start_y: float = 0.0,
    max_slots: Optional[int] = None,
    progress: bool = False,
) -> JointTransitionModel:
    transitions, durations, entries = simulate_pair_transitions(
        params, segment_length, lane_count, table, n_trajectories, rng, start_y, max_slots, progress
    )
    pairs = sorted({src for src, _ in transitions} | {dst for _, dst in transitions if dst is not None})
    index = {p: i for i, p in enumerate(pairs)}
    items = list(transitions.items())
    src = np.array([index[s] for (s, _), _ in items], dtype=int)
    dst = np.array([EXIT if d is None else index[d] for (_, d), _ in items], dtype=int)
    weights = np.array([c for _, c in items], dtype=float)

    visits = np.bincount(src, weights=weights, minlength=len(pairs))
    stay = dst != EXIT
    counts = sp.coo_matrix((weights[stay], (src[stay], dst[stay])), shape=(len(pairs),) * 2).tocsr()
    safe = np.where(visits > 0, visits, 1.0)
    sbpi = sp.diags(1.0 / safe) @ counts
    zero_rows = [int(i) for i in np.flatnonzero(visits == 0)]
    if zero_rows:
        logger.warning("%d SBPI pairs never left during training; their rows stay empty", len(zero_rows))

    rates = blockage_chain(blockage, params.slot_duration)
    entry = max(sorted(entries), key=lambda p: entries[p])
    model = JointTransitionModel(
        pairs,
        sbpi,
        [blockage_matrix(*r) for r in rates],
        params.slot_duration,
        mean_episode_slots=float(durations.mean()),
        entry_pair=entry,
        zero_rows=zero_rows,
    )
    logger.info(
        "joint model: %d SBPI pairs, %d states, mean episode %.1f slots",
        model.n_pairs, model.n_states, model.mean_episode_slots,
    )
    return model
