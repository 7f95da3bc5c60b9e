"""Validated configuration tree and API payloads.

Every physical default is the reference scenario, so ``ExperimentConfig()``
(or an empty JSON object) reproduces it. Fields suffixed ``_db``/``_dbm`` are
the only places decibels enter; consumers convert them once.
"""
from datetime import datetime
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Mode(str, Enum):
    sectored = "sectored"
    analog = "analog"


class PolicyName(str, Enum):
    cpbvi = "cpbvi"
    bheu = "bheu"
    fsm = "fsm"
    baseline = "baseline"
    genie = "genie"


class SweepVariable(str, Enum):
    snr_pre_db = "snr_pre_db"
    dt_duration = "dt_duration"
    scenario = "scenario"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ── Physical scenario ─────────────────────────────────────────────────────────
class SceneConfig(_Section):
    segment_length: float = Field(30.0, ge=0.0)
    lane_count: int = Field(2, ge=1)
    lane_separation: float = Field(3.5, gt=0.0)
    bs_distance: float = Field(22.0, gt=0.0)
    bs_height: float = 10.0
    ue_height: float = 0.0
    carrier_frequency: float = Field(30e9, gt=0.0)


class ArrayConfig(_Section):
    rows: int = Field(..., ge=1)
    cols: int = Field(..., ge=1)
    spacing: float = Field(0.5, gt=0.0)

    @property
    def size(self) -> int:
        return self.rows * self.cols


class ArraysConfig(_Section):
    bs: List[ArrayConfig] = Field(
        default_factory=lambda: [ArrayConfig(rows=32, cols=8), ArrayConfig(rows=32, cols=8)]
    )
    ue: ArrayConfig = Field(default_factory=lambda: ArrayConfig(rows=8, cols=4))

    @field_validator("bs")
    @classmethod
    def _two_bs(cls, v):
        if len(v) != 2:
            raise ValueError("exactly two BS arrays are required")
        return v


class ChannelConfig(_Section):
    noise_psd_dbm_hz: float = -174.0
    bandwidth: float = Field(100e6, gt=0.0)
    noise_figure_db: float = 10.0
    diffuse_variance_db: List[Optional[float]] = Field(default_factory=lambda: [-110.0, -110.0])

    @field_validator("diffuse_variance_db")
    @classmethod
    def _per_bs(cls, v):
        if len(v) != 2:
            raise ValueError("one diffuse variance per BS")
        return v


class CodebookConfig(_Section):
    bs_beams: int = Field(8, ge=1)
    ue_beams: int = Field(8, ge=1)
    grid_spacing: float = Field(0.25, gt=0.0, le=0.25)
    sidelobe_guard: float = Field(0.0, ge=0.0)
    rho_db: Optional[float] = None

    @field_validator("rho_db")
    @classmethod
    def _rho_below_one(cls, v):
        if v is not None and v >= 0.0:
            raise ValueError("sidelobe ratio must be below 0 dB")
        return v


class LinkConfig(_Section):
    slot_duration: float = Field(1e-4, gt=0.0)
    symbols_per_slot: Optional[float] = Field(None, gt=0.0)
    pilot_fraction: float = Field(0.01, gt=0.0, lt=1.0)
    ho_duration: int = Field(1, ge=1)


class MobilityConfig(_Section):
    mean_speed: float = Field(30.0, ge=0.0)
    speed_std: float = Field(10.0, ge=0.0)
    memory: float = Field(0.2, ge=0.0, le=1.0)
    lane_change_prob: float = Field(0.01, ge=0.0, le=1.0)


class BlockageConfig(_Section):
    steady_state_prob: List[float] = Field(default_factory=lambda: [0.2, 0.2])
    mean_duration: List[float] = Field(default_factory=lambda: [0.2, 0.2])

    @model_validator(mode="after")
    def _per_bs(self):
        if len(self.steady_state_prob) != 2 or len(self.mean_duration) != 2:
            raise ValueError("blockage parameters are per BS (two entries each)")
        if any(not 0.0 <= p < 1.0 for p in self.steady_state_prob):
            raise ValueError("steady-state blockage probability must lie in [0, 1)")
        return self


# ── Decision layer ────────────────────────────────────────────────────────────
class ActionGridConfig(_Section):
    snr_pre_db: List[float] = Field(default_factory=lambda: [18.0])
    bt_window_sizes: List[int] = Field(default_factory=lambda: [2, 4])
    dt_durations: List[int] = Field(default_factory=lambda: [20, 30, 40, 50])

    @field_validator("snr_pre_db", "dt_durations")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("grid must not be empty")
        return v

    @field_validator("dt_durations")
    @classmethod
    def _dt_at_least_two(cls, v):
        if any(t < 2 for t in v):
            raise ValueError("DT duration must be at least 2 slots")
        return v


class HeuristicConfig(_Section):
    snr_pre_db: float = 18.0
    dt_duration: int = Field(10, ge=2)
    thresholds: List[float] = Field(default_factory=lambda: [0.1, 0.8, 0.6])

    @field_validator("thresholds")
    @classmethod
    def _open_unit(cls, v):
        if len(v) != 3 or any(not 0.0 < t < 1.0 for t in v):
            raise ValueError("three thresholds in (0, 1) are required")
        return v


class SolverConfig(_Section):
    avg_power_dbm: float = 16.0
    lambda0: float = Field(0.0, ge=0.0)
    gamma0: float = Field(0.1, gt=0.0)
    eps_v: float = Field(0.01, gt=0.0)
    eps_e: float = Field(0.01, gt=0.0)
    max_iterations: int = Field(2000, ge=1)
    belief_set_size: Optional[int] = Field(None, ge=1)
    ssea_rounds: int = Field(2, ge=0)
    parallel: bool = False
    log_every: int = Field(25, ge=1)


class SimulationConfig(_Section):
    mode: Mode = Mode.sectored
    episodes: int = Field(1000, ge=1)
    policies: List[PolicyName] = Field(
        default_factory=lambda: [PolicyName.cpbvi, PolicyName.bheu, PolicyName.fsm,
                                 PolicyName.baseline, PolicyName.genie]
    )
    initial_bs: int = Field(1, ge=0, le=1)
    workers: int = Field(1, ge=1)
    trace_episodes: int = Field(1, ge=0)


class TrainingConfig(_Section):
    trajectories: int = Field(10000, ge=1)


class ScenarioConfig(_Section):
    label: str
    users: int = Field(1, ge=1)
    mean_speed: Optional[float] = Field(None, ge=0.0)
    steady_state_prob: List[float]
    mean_duration: List[float]


class SweepConfig(_Section):
    variable: SweepVariable = SweepVariable.snr_pre_db
    values: List[float] = Field(default_factory=lambda: [-12.0, -6.0, 0.0, 6.0, 12.0, 18.0])
    policies: List[PolicyName] = Field(
        default_factory=lambda: [PolicyName.bheu, PolicyName.fsm, PolicyName.baseline, PolicyName.genie]
    )
    modes: List[Mode] = Field(default_factory=lambda: [Mode.sectored])


class ExperimentConfig(_Section):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    arrays: ArraysConfig = Field(default_factory=ArraysConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    link: LinkConfig = Field(default_factory=LinkConfig)
    mobility: MobilityConfig = Field(default_factory=MobilityConfig)
    blockage: BlockageConfig = Field(default_factory=BlockageConfig)
    actions: ActionGridConfig = Field(default_factory=ActionGridConfig)
    heuristics: HeuristicConfig = Field(default_factory=HeuristicConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    scenarios: List[ScenarioConfig] = Field(default_factory=list)
    seed: int = Field(0, ge=0)
    output_dir: str = "./out"

    @model_validator(mode="after")
    def _pilots_fit(self):
        symbols = self.symbols_per_slot
        if self.link.pilot_fraction * symbols < 1.0:
            raise ValueError("pilot_fraction * symbols_per_slot must be at least one symbol")
        for duration in self.blockage.mean_duration:
            if duration < self.link.slot_duration:
                raise ValueError("mean blockage duration must be at least one slot")
        return self

    @property
    def symbols_per_slot(self) -> float:
        if self.link.symbols_per_slot is not None:
            return self.link.symbols_per_slot
        return self.channel.bandwidth * self.link.slot_duration


# ── API payloads ──────────────────────────────────────────────────────────────
class LinkStatsRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    bs_index: int = Field(0, ge=0, le=1)
    snr_db: Optional[List[float]] = None
    bt_sizes: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    rho_db: Optional[float] = None


class RunResultOut(BaseModel):
    model_config = ConfigDict(from_attributes=True)
    id: int
    policy: str
    variable: Optional[str] = None
    value: Optional[float] = None
    label: Optional[str] = None
    mode: str
    spectral_efficiency: Optional[float] = None
    se_ci_low: Optional[float] = None
    se_ci_high: Optional[float] = None
    power_w: Optional[float] = None
    power_dbm: Optional[float] = None
    episodes: int = 0
    status: str = "ok"


class RunOut(BaseModel):
    model_config = ConfigDict(from_attributes=True)
    id: int
    kind: str
    config_hash: str
    seed: int
    mode: Optional[str] = None
    output_dir: Optional[str] = None
    status: str
    created_at: datetime
    result_count: Optional[int] = 0


class RunDetailOut(RunOut):
    results: List[RunResultOut] = []
