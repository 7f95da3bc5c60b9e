"""Experiment harness: context assembly, episode simulation, metrics and sweeps.

Two fidelity modes share the policy logic. ``sectored`` draws the true state
and the feedback from the model slices one action at a time. ``analog`` moves
the UE slot by slot, evaluates the array gains geometrically and draws the
matched-filter statistics; belief-tracking policies still update with the
model's observation law.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from channel import ChannelParams, SceneGeometry, average_snr, pathloss, sample_received_power
from codebook import (
    CoverageGrid,
    JointCodebook,
    SbpiTable,
    SectoredCalibration,
    build_codebooks,
    calibrate_sectored,
    power_for_target_snr,
)
from config import db_to_linear, dbm_to_watts, linear_to_db, watts_to_dbm
from dynamics import (
    EXIT,
    BlockageParams,
    JointTransitionModel,
    MobilityParams,
    MobilityState,
    blockage_chain,
    blockage_step,
    joint_model_from_samples,
    mobility_step,
)
from errors import ConfigError, ImpossibleObservation, LinkAdaptError
from link_phases import epsilon_outage_capacity, link_statistics, optimal_outage_target, outage_probability
from pomdp_model import (
    ActionKind,
    ActionSpec,
    LinkModel,
    LinkParams,
    PomdpModel,
    belief_update,
    build_action_lists,
    predict_belief,
    sample_outcome,
)
from policies import (
    BaselinePolicy,
    BheuParams,
    BheuPolicy,
    CpbviPolicy,
    FsmActions,
    FsmPolicy,
    GeniePolicy,
    Policy,
    TrueState,
    belief_marginals,
)
from schemas import ExperimentConfig, Mode, PolicyName, SweepVariable
from solver import PolicyArtifact, build_belief_sets, cpbvi, solver_scales

logger = logging.getLogger(__name__)

Z_95 = 1.959963984540054

RESULT_HEADER = [
    "policy", "variable", "value", "mode", "spectral_efficiency", "se_ci_low", "se_ci_high",
    "power_w", "power_dbm", "power_dbm_ci_low", "power_dbm_ci_high", "episodes", "status", "error",
]

TRACE_HEADER = [
    "slot", "serving_bs", "sbpi_0", "sbpi_1", "blocked_0", "blocked_1", "action", "beams",
    "observation", "belief_aligned", "belief_top_beam", "bits", "energy",
]


# ── Context ───────────────────────────────────────────────────────────────────
@dataclass
class Geometry:
    scene: SceneGeometry
    channel: ChannelParams
    codebook: JointCodebook
    calibrations: List[SectoredCalibration]
    table: SbpiTable


def build_geometry(config: ExperimentConfig) -> Geometry:
    scene = SceneGeometry.from_config(config)
    channel = ChannelParams.from_config(config)
    codebook = build_codebooks(scene, config.arrays, config.codebook.bs_beams, config.codebook.ue_beams)
    grid = CoverageGrid.for_scene(scene, config.codebook.grid_spacing)
    rho = None if config.codebook.rho_db is None else db_to_linear(config.codebook.rho_db)
    calibrations, table = calibrate_sectored(
        codebook, grid, scene, channel.diffuse_variance, config.codebook.sidelobe_guard, rho
    )
    return Geometry(scene, channel, codebook, calibrations, table)


def train_joint_model(
    config: ExperimentConfig, geometry: Geometry, rng: np.random.Generator, progress: bool = False
) -> JointTransitionModel:
    return joint_model_from_samples(
        MobilityParams.from_config(config),
        BlockageParams.from_config(config),
        geometry.scene.segment_length,
        geometry.scene.lane_count,
        geometry.table,
        config.training.trajectories,
        rng,
        progress=progress,
    )


def peak_gains(config: ExperimentConfig) -> Tuple[float, float]:
    """M_tx·M_rx per BS."""
    ue = config.arrays.ue.size
    return tuple(float(a.size * ue) for a in config.arrays.bs)


def heuristic_snr(config: ExperimentConfig) -> Tuple[float, float]:
    return tuple(db_to_linear(config.heuristics.snr_pre_db) * g for g in peak_gains(config))


@dataclass
class LinkContext:
    config: ExperimentConfig
    geometry: Geometry
    joint: JointTransitionModel
    model: LinkModel

    @property
    def sbpi_sets(self) -> List[List[int]]:
        return [list(c.sbpi_set) for c in self.geometry.calibrations]

    @property
    def initial_state(self) -> int:
        return self.joint.initial_state()

    @property
    def initial_bs(self) -> int:
        return self.config.simulation.initial_bs

    @property
    def duration(self) -> float:
        """Expected episode duration from the initial state under the joint chain."""
        return self.joint.expected_duration()


def assemble_context(config: ExperimentConfig, geometry: Geometry, joint: JointTransitionModel) -> LinkContext:
    params = LinkParams.from_config(config, geometry.channel.noise_power)
    sbpi_sets = [c.sbpi_set for c in geometry.calibrations]
    actions = build_action_lists(sbpi_sets, config, peak_gains(config))
    model = LinkModel(joint, geometry.calibrations, params, actions)
    return LinkContext(config, geometry, joint, model)


def build_context(config: ExperimentConfig, seed: Optional[int] = None, progress: bool = False) -> LinkContext:
    geometry = build_geometry(config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    joint = train_joint_model(config, geometry, rng, progress)
    return assemble_context(config, geometry, joint)


def make_policy(name: PolicyName, ctx: LinkContext, artifact: Optional[PolicyArtifact] = None) -> Policy:
    cfg = ctx.config
    snr = heuristic_snr(cfg)
    ho = cfg.link.ho_duration
    dt = cfg.heuristics.dt_duration
    name = PolicyName(name)
    if name in (PolicyName.fsm, PolicyName.baseline):
        fsm = FsmActions(tuple(tuple(s) for s in ctx.sbpi_sets), snr, dt, ho)
        return FsmPolicy(fsm) if name == PolicyName.fsm else BaselinePolicy(fsm)
    if name == PolicyName.bheu:
        return BheuPolicy(BheuParams(tuple(cfg.heuristics.thresholds), snr, dt, ho), ctx.model, ctx.sbpi_sets)
    if name == PolicyName.genie:
        return GeniePolicy(snr, dt, ho)
    if artifact is None:
        raise ConfigError("the cpbvi policy needs a solved policy artifact")
    return CpbviPolicy(artifact)


def solve_policy(
    model: PomdpModel,
    config: ExperimentConfig,
    initial_state: int,
    duration: float,
    seed: Optional[int] = None,
    progress: bool = False,
) -> PolicyArtifact:
    seed = config.seed if seed is None else seed
    solver_cfg = config.solver
    reward_scale, cost_scale, budget = solver_scales(
        duration, config.channel.bandwidth, dbm_to_watts(solver_cfg.avg_power_dbm)
    )
    belief_rng, solve_seed = np.random.SeedSequence(seed).spawn(2)
    sets = build_belief_sets(model, solver_cfg.belief_set_size, solver_cfg.ssea_rounds,
                             np.random.default_rng(belief_rng))
    return cpbvi(
        model, sets, model.point_belief(initial_state), config.simulation.initial_bs,
        reward_scale, cost_scale, budget, solver_cfg,
        seed=int(solve_seed.generate_state(1)[0]), progress=progress,
    )


def convergence_rows(artifact: PolicyArtifact, duration: float) -> List[dict]:
    rows = []
    for h in artifact.history:
        power = h["cost"] / artifact.cost_scale / duration
        rows.append({
            "n": h["n"],
            "lambda": h["lambda"],
            "power_w": power,
            "power_dbm": watts_to_dbm(power),
            "spectral_efficiency": h["reward"],
            "lagrangian": h["lagrangian"],
            "value_residual": h["value_residual"],
        })
    return rows


# ── Episodes ──────────────────────────────────────────────────────────────────
@dataclass
class EpisodeTrace:
    rows: List[dict] = field(default_factory=list)
    bits: float = 0.0
    energy: float = 0.0
    slots: int = 0
    impossible_observations: int = 0


def _trace_row(slot, bs, truth: TrueState, spec: ActionSpec, y, belief, ctx, bits, energy) -> dict:
    aligned, top = "", ""
    if belief is not None:
        sbpi = ctx.sbpi_sets[bs]
        unblocked, xi = belief_marginals(belief, bs, ctx.model, sbpi)
        aligned = unblocked
        top = sbpi[int(np.argmax(xi))] if unblocked > 0.0 else ""
    return {
        "slot": slot,
        "serving_bs": bs,
        "sbpi_0": truth.pair[0],
        "sbpi_1": truth.pair[1],
        "blocked_0": 1 - truth.unblocked[0],
        "blocked_1": 1 - truth.unblocked[1],
        "action": spec.kind.value,
        "beams": " ".join(str(j) for j in spec.beams),
        "observation": "" if y is None else y,
        "belief_aligned": aligned,
        "belief_top_beam": top,
        "bits": bits,
        "energy": energy,
    }


def _track_belief(belief, model: PomdpModel, bs: int, spec: ActionSpec, label, trace: EpisodeTrace):
    action = model.slice_for(bs, spec)
    try:
        return belief_update(belief, action, spec.observation_index(label))
    except ImpossibleObservation as exc:
        trace.impossible_observations += 1
        logger.warning("%s; resetting to the predicted belief", exc.message)
        prior = predict_belief(belief, action)
        return prior if prior is not None else np.full(belief.size, 1.0 / belief.size)


def _run_sectored(policy: Policy, ctx: LinkContext, rng: np.random.Generator, record: bool) -> EpisodeTrace:
    trace = EpisodeTrace()
    model, joint = ctx.model, ctx.joint
    u = ctx.initial_state
    bs = ctx.initial_bs
    belief = model.point_belief(u) if policy.tracks_belief else None
    policy.reset(bs)
    while True:
        pair, b0, b1 = joint.decode(u)
        truth = TrueState(pair, (b0, b1))
        spec = policy.act(bs, belief, truth)
        action = model.slice_for(bs, spec)
        bits, energy = float(action.reward[u]), float(action.cost[u])
        y, u_next = sample_outcome(action, u, rng)
        label = None if y == EXIT else spec.observation_label(y)
        if record:
            trace.rows.append(_trace_row(trace.slots, bs, truth, spec, label, belief, ctx, bits, energy))
        trace.bits += bits
        trace.energy += energy
        trace.slots += spec.duration
        if y == EXIT:
            return trace
        if belief is not None:
            belief = _track_belief(belief, model, bs, spec, label, trace)
        policy.observe(spec, label, action.next_bs)
        bs, u = action.next_bs, u_next


@dataclass
class _Ue:
    mobility: MobilityState
    unblocked: np.ndarray

    def pair(self, table: SbpiTable) -> Tuple[int, int]:
        p0, p1 = table.pair(self.mobility.y, self.mobility.lane)
        return int(p0), int(p1)


def _advance(ue: _Ue, slots: int, ctx: LinkContext, rng, mobility, rates) -> List[Optional[_Ue]]:
    """States at the start of each of ``slots`` slots plus the state after them; None once exited."""
    scene = ctx.geometry.scene
    path = [ue]
    current = ue
    for _ in range(slots):
        moved = mobility_step(current.mobility, mobility, scene.segment_length, scene.lane_count, rng)
        if moved is None:
            path.append(None)
            break
        current = _Ue(moved, blockage_step(current.unblocked, rates, rng))
        path.append(current)
    return path


def _actual_snr(ctx: LinkContext, bs: int, beams: Sequence[int], target: float, states: Sequence[_Ue]) -> np.ndarray:
    """Average SNR of each beam at each state, shape (len(states), len(beams))."""
    geo = ctx.geometry
    positions = np.array([geo.scene.ue_position(s.mobility.y, s.mobility.lane) for s in states])
    gains, distance = geo.codebook.gain_table(geo.scene, bs, positions)
    loss = pathloss(distance, geo.scene.wavelength)
    cal = geo.calibrations[bs]
    noise = geo.channel.noise_power
    power = np.array([power_for_target_snr(target, j, cal, noise) for j in beams])
    blocked = np.array([s.unblocked[bs] for s in states], dtype=float)
    return average_snr(power[None, :], gains[:, list(beams)], 1.0, loss[:, None], blocked[:, None],
                       cal.diffuse_variance, noise)


def _run_analog(policy: Policy, ctx: LinkContext, rng: np.random.Generator, record: bool) -> EpisodeTrace:
    trace = EpisodeTrace()
    cfg, model, geo = ctx.config, ctx.model, ctx.geometry
    if geo.scene.segment_length <= 0.0:
        return trace
    mobility = MobilityParams.from_config(cfg)
    rates = blockage_chain(BlockageParams.from_config(cfg), cfg.link.slot_duration)
    symbols = cfg.symbols_per_slot
    kappa = cfg.link.pilot_fraction
    bandwidth = cfg.channel.bandwidth
    slot = cfg.link.slot_duration

    start = MobilityState(cfg.mobility.mean_speed, 0.0, int(rng.integers(geo.scene.lane_count)))
    ue = _Ue(start, np.array([1, 1]))
    bs = ctx.initial_bs
    belief = model.point_belief(ctx.initial_state) if policy.tracks_belief else None
    policy.reset(bs)
    while True:
        pair = ue.pair(geo.table)
        truth = TrueState(pair, (int(ue.unblocked[0]), int(ue.unblocked[1])))
        spec = policy.act(bs, belief, truth)
        action = model.slice_for(bs, spec)
        energy = float(action.cost[0])
        path = _advance(ue, spec.duration, ctx, rng, mobility, rates)
        exited = path[-1] is None
        label, bits = None, 0.0

        if spec.kind == ActionKind.BT:
            snr = _actual_snr(ctx, bs, spec.beams, spec.snr, [path[0]])[0]
            stats = np.array([sample_received_power(s, symbols, rng) for s in snr])
            best = int(np.argmax(stats))
            if stats[best] >= action.eta:
                label = spec.beams[best]
        elif spec.kind == ActionKind.DT:
            beam = spec.beams[0]
            eps, _ = optimal_outage_target(spec.snr, kappa, bandwidth)
            rate = epsilon_outage_capacity(spec.snr, eps, bandwidth)
            data = [s for s in path[:spec.duration - 1] if s is not None]
            snr = _actual_snr(ctx, bs, (beam,), spec.snr, data)[:, 0]
            for value in snr:
                failed = 1.0 if value <= 0.0 else outage_probability(rate, value, bandwidth)
                if rng.random() >= failed:
                    bits += (1.0 - kappa) * rate * slot
            if not exited:
                pilot = sample_received_power(snr[spec.duration - 2], kappa * symbols, rng)
                label = beam if pilot >= action.eta else None

        if record:
            y_out = None if exited else label
            trace.rows.append(_trace_row(trace.slots, bs, truth, spec, y_out, belief, ctx, bits, energy))
        trace.bits += bits
        trace.energy += energy
        trace.slots += len(path) - 1
        if exited:
            return trace
        if belief is not None:
            belief = _track_belief(belief, model, bs, spec, label, trace)
        policy.observe(spec, label, action.next_bs)
        bs, ue = action.next_bs, path[-1]


def run_episode(
    policy: Policy, ctx: LinkContext, mode: Mode, rng: np.random.Generator, record: bool = False
) -> EpisodeTrace:
    if Mode(mode) == Mode.analog:
        return _run_analog(policy, ctx, rng, record)
    return _run_sectored(policy, ctx, rng, record)


# ── Metrics ───────────────────────────────────────────────────────────────────
@dataclass
class MetricsReport:
    policy: str
    mode: str
    episodes: int
    reward_bits: float
    energy_j: float
    duration_s: float
    measured_duration_s: float
    spectral_efficiency: float
    se_ci: Tuple[float, float]
    power_w: float
    power_ci_w: Tuple[float, float]
    impossible_observations: int = 0

    @property
    def power_dbm(self) -> float:
        return watts_to_dbm(self.power_w)

    def as_row(self, variable: Optional[str] = None, value=None) -> dict:
        return {
            "policy": self.policy,
            "variable": variable or "",
            "value": "" if value is None else value,
            "mode": self.mode,
            "spectral_efficiency": self.spectral_efficiency,
            "se_ci_low": self.se_ci[0],
            "se_ci_high": self.se_ci[1],
            "power_w": self.power_w,
            "power_dbm": self.power_dbm,
            "power_dbm_ci_low": watts_to_dbm(self.power_ci_w[0]),
            "power_dbm_ci_high": watts_to_dbm(self.power_ci_w[1]),
            "episodes": self.episodes,
            "status": "ok",
            "error": "",
        }


def _mean_ci(values: np.ndarray) -> Tuple[float, float]:
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, 0.0
    return mean, Z_95 * float(np.std(values, ddof=1)) / math.sqrt(values.size)


def summarize(policy: str, mode: Mode, ctx: LinkContext, traces: Sequence[EpisodeTrace]) -> MetricsReport:
    """Little's theorem: throughput and power are per-episode totals over the mean duration."""
    bits = np.array([t.bits for t in traces])
    energy = np.array([t.energy for t in traces])
    slots = np.array([t.slots for t in traces], dtype=float)
    measured = float(slots.mean()) * ctx.config.link.slot_duration
    duration = ctx.duration if Mode(mode) == Mode.sectored else measured
    bandwidth = ctx.config.channel.bandwidth
    if duration <= 0.0:
        return MetricsReport(policy, Mode(mode).value, len(traces), 0.0, 0.0, 0.0, measured,
                             0.0, (0.0, 0.0), 0.0, (0.0, 0.0))
    r, r_half = _mean_ci(bits)
    e, e_half = _mean_ci(energy)
    scale = 1.0 / (duration * bandwidth)
    return MetricsReport(
        policy=policy,
        mode=Mode(mode).value,
        episodes=len(traces),
        reward_bits=r,
        energy_j=e,
        duration_s=duration,
        measured_duration_s=measured,
        spectral_efficiency=r * scale,
        se_ci=((r - r_half) * scale, (r + r_half) * scale),
        power_w=e / duration,
        power_ci_w=(max(e - e_half, 0.0) / duration, (e + e_half) / duration),
        impossible_observations=int(sum(t.impossible_observations for t in traces)),
    )


def _run_chunk(args) -> List[EpisodeTrace]:
    name, ctx, mode, artifact, seeds, record_upto, offset = args
    policy = make_policy(name, ctx, artifact)
    traces = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        traces.append(run_episode(policy, ctx, mode, rng, record=offset + i < record_upto))
    return traces


def evaluate(
    name: PolicyName,
    ctx: LinkContext,
    mode: Mode,
    n_episodes: int,
    seed: int,
    artifact: Optional[PolicyArtifact] = None,
    workers: int = 1,
    trace_episodes: int = 0,
    progress: bool = False,
) -> Tuple[MetricsReport, List[EpisodeTrace]]:
    """Monte-Carlo metrics over independent episodes with per-episode seed substreams."""
    if n_episodes < 1:
        raise ValueError("at least one episode is required")
    seeds = np.random.SeedSequence(seed).spawn(n_episodes)
    name = PolicyName(name)
    if workers > 1:
        bounds = np.linspace(0, n_episodes, workers + 1).astype(int)
        jobs = [(name, ctx, mode, artifact, seeds[lo:hi], trace_episodes, lo)
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = [t for chunk in pool.map(_run_chunk, jobs) for t in chunk]
    else:
        policy = make_policy(name, ctx, artifact)
        traces = []
        for i, s in enumerate(tqdm(seeds, desc=f"{name.value}/{Mode(mode).value}", disable=not progress, leave=False)):
            traces.append(run_episode(policy, ctx, mode, np.random.default_rng(s), record=i < trace_episodes))
    report = summarize(name.value, mode, ctx, traces)
    logger.info(
        "%s [%s]: %.4f bps/Hz at %.2f dBm over %d episodes",
        name.value, Mode(mode).value, report.spectral_efficiency, report.power_dbm, n_episodes,
    )
    if report.impossible_observations:
        logger.warning("%s: %d impossible observations", name.value, report.impossible_observations)
    return report, traces[:trace_episodes]


def genie_upper_bound(ctx: LinkContext, mode: Mode, n_episodes: int, seed: int, workers: int = 1) -> float:
    report, _ = evaluate(PolicyName.genie, ctx, mode, n_episodes, seed, workers=workers)
    return report.spectral_efficiency


# ── Sweeps ────────────────────────────────────────────────────────────────────
def apply_sweep_value(config: ExperimentConfig, variable: SweepVariable, value) -> ExperimentConfig:
    cfg = config.model_copy(deep=True)
    if variable == SweepVariable.snr_pre_db:
        cfg.heuristics.snr_pre_db = float(value)
        cfg.actions.snr_pre_db = [float(value)]
    elif variable == SweepVariable.dt_duration:
        if int(value) < 2:
            raise ValueError("DT duration must be at least 2 slots")
        cfg.heuristics.dt_duration = int(value)
        cfg.actions.dt_durations = [int(value)]
    else:
        scenario = value
        if scenario.mean_speed is not None:
            cfg.mobility.mean_speed = scenario.mean_speed
        cfg.blockage.steady_state_prob = list(scenario.steady_state_prob)
        cfg.blockage.mean_duration = list(scenario.mean_duration)
    return ExperimentConfig.model_validate(cfg.model_dump())


def _failed_row(name, variable, value, mode, exc) -> dict:
    row = {key: "" for key in RESULT_HEADER}
    code = exc.code if isinstance(exc, LinkAdaptError) else "INVALID_ARGUMENT"
    row.update(policy=PolicyName(name).value, variable=variable, value=value, mode=Mode(mode).value,
               episodes=0, status="failed", error=code)
    return row


def sweep(
    config: ExperimentConfig,
    geometry: Optional[Geometry] = None,
    joint: Optional[JointTransitionModel] = None,
    progress: bool = False,
) -> List[dict]:
    """One row per (sweep point, mode, policy) in that order; failures become marked rows."""
    plan = config.sweep
    variable = plan.variable
    geometry = geometry or build_geometry(config)
    if variable == SweepVariable.scenario:
        if not config.scenarios:
            raise ConfigError("scenario sweep needs a non-empty scenarios table")
        points = [(s.label, s) for s in config.scenarios]
    else:
        points = [(v, v) for v in plan.values]

    rows = []
    for value, payload in tqdm(points, desc="sweep", disable=not progress, leave=False):
        users = payload.users if variable == SweepVariable.scenario else 1
        try:
            cfg = apply_sweep_value(config, variable, payload)
            point_joint = joint
            if point_joint is None or variable == SweepVariable.scenario:
                point_joint = train_joint_model(cfg, geometry, np.random.default_rng(cfg.seed), progress)
            ctx = assemble_context(cfg, geometry, point_joint)
        except (LinkAdaptError, ValueError) as exc:
            logger.warning("sweep point %s=%s failed: %s", variable.value, value, exc)
            rows.extend(_failed_row(p, variable.value, value, m, exc) for m in plan.modes for p in plan.policies)
            continue

        artifact = None
        for mode in plan.modes:
            for name in plan.policies:
                try:
                    if name == PolicyName.cpbvi and artifact is None:
                        artifact = solve_policy(ctx.model, cfg, ctx.initial_state, ctx.duration)
                    reports = [
                        evaluate(name, ctx, mode, cfg.simulation.episodes, seed, artifact,
                                 cfg.simulation.workers)[0]
                        for seed in _user_seeds(cfg.seed, users)
                    ]
                except (LinkAdaptError, ValueError) as exc:
                    logger.warning("sweep point %s=%s policy %s failed: %s", variable.value, value, name, exc)
                    rows.append(_failed_row(name, variable.value, value, mode, exc))
                    continue
                row = _combine_users(reports).as_row(variable.value, value)
                if variable == SweepVariable.scenario:
                    row.update(users=users, mean_speed=cfg.mobility.mean_speed)
                rows.append(row)
    return rows


def _user_seeds(seed: int, users: int) -> List[int]:
    if users == 1:
        return [seed]
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(users)]


def _combine_users(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Independent OFDMA users: mean of per-user spectral efficiency and power."""
    if len(reports) == 1:
        return reports[0]
    first = reports[0]

    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    return replace(
        first,
        episodes=sum(r.episodes for r in reports),
        reward_bits=mean("reward_bits"),
        energy_j=mean("energy_j"),
        spectral_efficiency=mean("spectral_efficiency"),
        se_ci=(float(np.mean([r.se_ci[0] for r in reports])), float(np.mean([r.se_ci[1] for r in reports]))),
        power_w=mean("power_w"),
        power_ci_w=(float(np.mean([r.power_ci_w[0] for r in reports])),
                    float(np.mean([r.power_ci_w[1] for r in reports]))),
        impossible_observations=sum(r.impossible_observations for r in reports),
    )


# ── Link statistics ───────────────────────────────────────────────────────────
def linkstats_report(
    config: ExperimentConfig,
    bs_index: int = 0,
    snr_db: Optional[Sequence[float]] = None,
    bt_sizes: Sequence[int] = (1, 2, 4, 8),
    rho_db: Optional[float] = None,
) -> Dict:
    """Thresholds, feedback laws and throughput-optimal outage per SNR (dB, post-beamforming)."""
    if rho_db is None:
        rho_db = config.codebook.rho_db
    if rho_db is None:
        cal = build_geometry(config).calibrations[bs_index]
        rho_db = linear_to_db(cal.rho)
    if snr_db is None:
        snr_db = [linear_to_db(heuristic_snr(config)[bs_index])]
    symbols = config.symbols_per_slot
    points = []
    for value in snr_db:
        stats = link_statistics(db_to_linear(value), symbols, db_to_linear(rho_db),
                                config.link.pilot_fraction, config.channel.bandwidth, tuple(bt_sizes))
        stats["snr_db"] = value
        points.append(stats)
    return {"bs_index": bs_index, "rho_db": rho_db, "symbols_per_slot": symbols, "points": points}
