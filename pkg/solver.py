"""Constrained point-based value iteration.

Hyperplanes keep reward and cost parts apart so the Lagrangian value
``<β, α_r - λ·α_e>`` can be re-evaluated for any multiplier. Internally the
solver works on normalized quantities: rewards are multiplied by
``reward_scale`` and costs by ``cost_scale`` so that the energy budget becomes
``budget`` (1.0 for a finite budget). Physical values are restored on output.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from dynamics import EXIT
from errors import ImpossibleObservation, NotConverged
from pomdp_model import ActionSpec, PomdpModel, belief_update, sample_outcome
from schemas import SolverConfig

logger = logging.getLogger(__name__)


@dataclass
class HyperplaneSet:
    reward: np.ndarray  # (K, |U|)
    cost: np.ndarray  # (K, |U|)
    actions: np.ndarray  # (K,) indices into the BS action list

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def zero(cls, n_states: int, action: int) -> "HyperplaneSet":
        return cls(np.zeros((1, n_states)), np.zeros((1, n_states)), np.array([action]))

    def lagrangian(self, lam: float) -> np.ndarray:
        return self.reward - lam * self.cost

    def values(self, beliefs: np.ndarray, lam: float) -> np.ndarray:
        """Best Lagrangian value for each row of ``beliefs``."""
        return (np.atleast_2d(beliefs) @ self.lagrangian(lam).T).max(axis=1)

    def best(self, belief: np.ndarray, lam: float) -> int:
        # argmax returns the lowest index among ties
        return int(np.argmax(self.lagrangian(lam) @ belief))

    def deduplicated(self) -> "HyperplaneSet":
        seen, keep = set(), []
        for k in range(len(self)):
            key = (int(self.actions[k]), self.reward[k].tobytes(), self.cost[k].tobytes())
            if key not in seen:
                seen.add(key)
                keep.append(k)
        return HyperplaneSet(self.reward[keep], self.cost[keep], self.actions[keep])


# ── Belief sets ───────────────────────────────────────────────────────────────
def _push_unique(points: List[np.ndarray], candidate: np.ndarray) -> None:
    if all(np.abs(candidate - p).sum() > 0.0 for p in points):
        points.append(candidate)


def seed_belief_set(model: PomdpModel, bs_index: int, size: Optional[int] = None) -> np.ndarray:
    """Deterministic cover: vertices, uniform, then per-pair structured beliefs."""
    n = model.n_states
    if size is not None and size < n + 1:
        raise ValueError("belief set must hold at least |U| + 1 points")
    points = [row for row in np.eye(n)]
    _push_unique(points, np.full(n, 1.0 / n))
    if model.pair_of_state is not None:
        pair_of_state = model.pair_of_state
        unblocked = model.unblocked[bs_index]
        structured = []
        for s in np.unique(pair_of_state):
            structured.append(pair_of_state == s)
        for s in np.unique(pair_of_state):
            structured.append((pair_of_state == s) & (unblocked == 1))
        for s in np.unique(pair_of_state):
            structured.append((pair_of_state == s) & (unblocked == 0))
        for mask in structured:
            if size is not None and len(points) >= size:
                break
            if mask.sum() > 1:
                _push_unique(points, mask / mask.sum())
    if size is not None:
        points = points[:size]
    return np.array(points)


def _sample_state(belief: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(belief)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), belief.size - 1)


def _min_distance(candidate: np.ndarray, points: Sequence[np.ndarray]) -> float:
    return float(np.abs(np.asarray(points) - candidate).sum(axis=1).min())


def ssea_expand(
    belief_sets: Sequence[np.ndarray],
    model: PomdpModel,
    rounds: int,
    rng: np.random.Generator,
) -> List[np.ndarray]:
    """Stochastic simulation with exploratory actions.

    Every belief simulates one step of each action; the successor farthest
    (in L1) from the set it belongs to is added. Successors of a handover join
    the other BS's set.
    """
    sets = [list(s) for s in belief_sets]
    for _ in range(rounds):
        snapshot = [list(s) for s in sets]
        for bs_index in (0, 1):
            for belief in snapshot[bs_index]:
                best, best_bs, best_distance = None, None, 0.0
                for a in range(len(model.actions[bs_index])):
                    action = model.slice(bs_index, a)
                    u = _sample_state(belief, rng)
                    y, _ = sample_outcome(action, u, rng)
                    if y == EXIT:
                        continue
                    try:
                        candidate = belief_update(belief, action, y)
                    except ImpossibleObservation:
                        continue
                    distance = _min_distance(candidate, sets[action.next_bs])
                    if distance > best_distance:
                        best, best_bs, best_distance = candidate, action.next_bs, distance
                if best is not None:
                    sets[best_bs].append(best)
    return [np.array(s) for s in sets]


def build_belief_sets(model: PomdpModel, size: Optional[int], rounds: int, rng: np.random.Generator):
    seeds = [seed_belief_set(model, bs, size) for bs in (0, 1)]
    sets = ssea_expand(seeds, model, rounds, rng) if rounds else seeds
    logger.info("belief sets: %d / %d points", len(sets[0]), len(sets[1]))
    return sets


# ── Backups ───────────────────────────────────────────────────────────────────
@dataclass
class _ScaledAction:
    blocks: list
    reward: np.ndarray
    cost: np.ndarray
    next_bs: int


def _scaled_actions(model: PomdpModel, bs_index: int, reward_scale: float, cost_scale: float):
    out = []
    for a in range(len(model.actions[bs_index])):
        s = model.slice(bs_index, a)
        out.append(_ScaledAction(s.blocks, s.reward * reward_scale, s.cost * cost_scale, s.next_bs))
    return out


def backup_belief(
    belief: np.ndarray,
    actions: Sequence[_ScaledAction],
    previous: Sequence[HyperplaneSet],
    lam: float,
) -> Tuple[np.ndarray, np.ndarray, int, float]:
    """Best backed-up hyperplane at ``belief``: (reward, cost, action, value)."""
    lagrangians = [q.lagrangian(lam) for q in previous]
    best = None
    for a, action in enumerate(actions):
        target = previous[action.next_bs]
        reward = action.reward.copy()
        cost = action.cost.copy()
        for block in action.blocks:
            if block.nnz == 0:
                continue
            projected = belief @ block
            k = int(np.argmax(lagrangians[action.next_bs] @ projected))
            reward += block @ target.reward[k]
            cost += block @ target.cost[k]
        value = float(belief @ (reward - lam * cost))
        if best is None or value > best[3]:
            best = (reward, cost, a, value)
    return best


def perseus_backup(
    bs_index: int,
    beliefs: np.ndarray,
    previous: Sequence[HyperplaneSet],
    actions: Sequence[_ScaledAction],
    lam: float,
    rng: np.random.Generator,
) -> HyperplaneSet:
    """One randomized PERSEUS stage for serving BS ``bs_index``.

    Every belief ends with a value at least as high as under ``previous``.
    Beliefs whose value only ties the previous stage are backed up themselves,
    otherwise the zero bootstrap can leave them stuck at their first value.
    """
    current = previous[bs_index]
    old_values = current.values(beliefs, lam)
    tolerance = 1e-12 * max(1.0, float(np.max(np.abs(old_values))))
    new_values = np.full(len(beliefs), -np.inf)
    picked = np.zeros(len(beliefs), dtype=bool)
    rewards, costs, acts = [], [], []
    pending = np.arange(len(beliefs))
    while pending.size:
        pick = pending[rng.integers(pending.size)]
        belief = beliefs[pick]
        reward, cost, action, value = backup_belief(belief, actions, previous, lam)
        if value < old_values[pick]:
            k = current.best(belief, lam)
            reward, cost, action = current.reward[k], current.cost[k], int(current.actions[k])
        rewards.append(reward)
        costs.append(cost)
        acts.append(action)
        new_values = np.maximum(new_values, beliefs @ (reward - lam * cost))
        # a picked belief is improved or matched by construction
        picked[pick] = True
        pending = np.flatnonzero((new_values <= old_values + tolerance) & ~picked)
    return HyperplaneSet(np.array(rewards), np.array(costs), np.array(acts, dtype=int)).deduplicated()


# ── C-PBVI ────────────────────────────────────────────────────────────────────
@dataclass
class PolicyArtifact:
    hyperplanes: List[HyperplaneSet]
    actions: List[List[ActionSpec]]
    lam: float
    reward_scale: float
    cost_scale: float
    budget: float
    initial_belief: np.ndarray
    initial_bs: int
    iterations: int
    converged: bool
    history: List[dict] = field(default_factory=list)
    config_hash: Optional[str] = None

    @property
    def physical_lambda(self) -> float:
        """Multiplier in bits per joule."""
        return self.lam * self.cost_scale / self.reward_scale

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "lambda_bits_per_joule": self.physical_lambda,
            "reward_scale": self.reward_scale,
            "cost_scale": self.cost_scale,
            "budget": None if math.isinf(self.budget) else self.budget,
            "initial_belief": self.initial_belief.tolist(),
            "initial_bs": self.initial_bs,
            "iterations": self.iterations,
            "converged": self.converged,
            "history": self.history,
            "actions": [[spec.to_dict() for spec in per_bs] for per_bs in self.actions],
            "hyperplanes": [
                {"reward": q.reward.tolist(), "cost": q.cost.tolist(), "actions": q.actions.tolist()}
                for q in self.hyperplanes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyArtifact":
        sets = []
        for q in data["hyperplanes"]:
            sets.append(HyperplaneSet(np.asarray(q["reward"], dtype=float), np.asarray(q["cost"], dtype=float),
                                      np.asarray(q["actions"], dtype=int)))
        budget = data["budget"]
        return cls(
            hyperplanes=sets,
            actions=[[ActionSpec.from_dict(s) for s in per_bs] for per_bs in data["actions"]],
            lam=float(data["lambda"]),
            reward_scale=float(data["reward_scale"]),
            cost_scale=float(data["cost_scale"]),
            budget=math.inf if budget is None else float(budget),
            initial_belief=np.asarray(data["initial_belief"], dtype=float),
            initial_bs=int(data["initial_bs"]),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            history=list(data.get("history", [])),
            config_hash=data.get("config_hash"),
        )


def policy_action(belief: np.ndarray, bs_index: int, artifact: PolicyArtifact) -> Tuple[ActionSpec, float, float]:
    """Action of the λ-maximizing hyperplane with its reward (bits) and cost (J) estimates."""
    q = artifact.hyperplanes[bs_index]
    k = q.best(belief, artifact.lam)
    spec = artifact.actions[bs_index][int(q.actions[k])]
    reward = float(belief @ q.reward[k]) / artifact.reward_scale
    cost = float(belief @ q.cost[k]) / artifact.cost_scale
    return spec, reward, cost


def cpbvi(
    model: PomdpModel,
    belief_sets: Sequence[np.ndarray],
    initial_belief: np.ndarray,
    initial_bs: int,
    reward_scale: float,
    cost_scale: float,
    budget: float,
    settings: SolverConfig,
    seed: int = 0,
    progress: bool = False,
) -> PolicyArtifact:
    """PERSEUS stages on both BSs alternated with projected-subgradient steps on λ.

    Stops when the value change over the belief sets is below ``eps_v``, the
    normalized cost at the initial belief is within budget (up to ``eps_e``) and
    ``λ·|Ē - budget| < eps_e``. Hitting the iteration cap returns an artifact
    with ``converged=False``.
    """
    actions = [_scaled_actions(model, bs, reward_scale, cost_scale) for bs in (0, 1)]
    hyperplanes = [HyperplaneSet.zero(model.n_states, model.handover_index(bs)) for bs in (0, 1)]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    lam = settings.lambda0
    history: List[dict] = []
    converged = False
    executor = ThreadPoolExecutor(max_workers=2) if settings.parallel else None

    bar = tqdm(total=settings.max_iterations, desc="c-pbvi", disable=not progress, leave=False)
    n = 0
    try:
        for n in range(settings.max_iterations):
            snapshot = list(hyperplanes)
            if executor is not None:
                futures = [
                    executor.submit(perseus_backup, bs, belief_sets[bs], snapshot, actions[bs], lam, rngs[bs])
                    for bs in (0, 1)
                ]
                updated = [f.result() for f in futures]
            else:
                updated = [
                    perseus_backup(bs, belief_sets[bs], snapshot, actions[bs], lam, rngs[bs]) for bs in (0, 1)
                ]
            residual = max(
                float(np.max(np.abs(updated[bs].values(belief_sets[bs], lam)
                                    - snapshot[bs].values(belief_sets[bs], lam))))
                for bs in (0, 1)
            )
            hyperplanes = updated

            q = hyperplanes[initial_bs]
            k = q.best(initial_belief, lam)
            reward = float(initial_belief @ q.reward[k])
            cost = float(initial_belief @ q.cost[k])
            gap = cost - budget
            slack = 0.0 if lam == 0.0 else lam * abs(gap)
            history.append({
                "n": n,
                "lambda": lam,
                "reward": reward,
                "cost": cost,
                "lagrangian": reward - lam * cost,
                "value_residual": residual,
                "hyperplanes": [len(hyperplanes[0]), len(hyperplanes[1])],
            })
            logger.debug("iter %d: lambda=%.5g reward=%.5g cost=%.5g residual=%.3g", n, lam, reward, cost, residual)
            if n % settings.log_every == 0:
                logger.info("c-pbvi iter %d: lambda=%.4g cost/budget=%.4g residual=%.3g", n, lam, cost, residual)
            bar.update(1)

            if residual < settings.eps_v and gap <= settings.eps_e and slack < settings.eps_e:
                converged = True
                break
            lam = max(lam + settings.gamma0 / (n + 1) * gap, 0.0)
    finally:
        bar.close()
        if executor is not None:
            executor.shutdown()

    if not converged:
        logger.warning("c-pbvi stopped after %d iterations without meeting the KKT tolerances", n + 1)
    return PolicyArtifact(
        hyperplanes=hyperplanes,
        actions=[list(a) for a in model.actions],
        lam=lam,
        reward_scale=reward_scale,
        cost_scale=cost_scale,
        budget=budget,
        initial_belief=np.asarray(initial_belief, dtype=float),
        initial_bs=initial_bs,
        iterations=n + 1,
        converged=converged,
        history=history,
    )


def require_converged(artifact: PolicyArtifact) -> PolicyArtifact:
    if not artifact.converged:
        last = artifact.history[-1] if artifact.history else {}
        raise NotConverged(
            "constrained value iteration hit the iteration cap",
            iterations=artifact.iterations,
            value_residual=last.get("value_residual"),
            cost=last.get("cost"),
            budget=None if math.isinf(artifact.budget) else artifact.budget,
            lambda_=artifact.lam,
        )
    return artifact


def solver_scales(duration: float, bandwidth: float, avg_power_w: Optional[float]) -> Tuple[float, float, float]:
    """(reward_scale, cost_scale, normalized budget) for an episode of mean ``duration`` seconds.

    Rewards become spectral efficiency (bits/(s·Hz) per episode); costs are
    measured in units of the energy budget, or of ``duration`` joules when the
    constraint is inactive.
    """
    if duration <= 0.0:
        raise ValueError("expected episode duration must be positive")
    reward_scale = 1.0 / (duration * bandwidth)
    if avg_power_w is None or math.isinf(avg_power_w):
        return reward_scale, 1.0 / duration, math.inf
    return reward_scale, 1.0 / (duration * avg_power_w), 1.0
