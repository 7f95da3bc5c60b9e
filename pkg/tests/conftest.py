import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from codebook import SectoredCalibration
from database import get_db, init_registry
from dynamics import JointTransitionModel, blockage_matrix
from harness import LinkContext, build_context
from main import app
from policies import FsmActions
from pomdp_model import ActionSlice, ActionSpec, LinkModel, LinkParams, TabularModel, enumerate_actions
from schemas import ExperimentConfig

SMALL_CONFIG = {
    "scene": {"segment_length": 6.0},
    "arrays": {
        "bs": [{"rows": 4, "cols": 4}, {"rows": 4, "cols": 4}],
        "ue": {"rows": 2, "cols": 2},
    },
    "codebook": {"bs_beams": 4, "ue_beams": 2, "sidelobe_guard": 1.0, "rho_db": -15.0},
    "actions": {"snr_pre_db": [18.0], "bt_window_sizes": [2], "dt_durations": [10, 20]},
    "heuristics": {"dt_duration": 10},
    "solver": {"max_iterations": 5, "ssea_rounds": 1},
    "simulation": {"episodes": 6, "policies": ["bheu", "fsm", "baseline", "genie"], "trace_episodes": 1},
    "training": {"trajectories": 200},
    "sweep": {"variable": "dt_duration", "values": [10], "policies": ["fsm"]},
}

TOY_SNR = 100.0


# ── Configs and built contexts ────────────────────────────────────────────────
@pytest.fixture(scope="session")
def small_config_dict():
    return SMALL_CONFIG


@pytest.fixture(scope="session")
def small_config():
    return ExperimentConfig.model_validate(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_context(small_config):
    return build_context(small_config, seed=7)


# ── Hand-built models ─────────────────────────────────────────────────────────
@pytest.fixture
def make_static_model():
    """Two static states; DT on beam k earns 1 in state k, feedback is uninformative."""
    def build(q=0.5):
        slices = []
        for bs in (0, 1):
            per_bs = []
            for k in (0, 1):
                tensor = np.zeros((2, 2, 2))
                tensor[0, 0, 0] = tensor[1, 0, 1] = 1.0 - q
                reward = np.eye(2)[k]
                per_bs.append(ActionSlice.from_dense(ActionSpec.transmission(k, 1.0, 2), tensor, reward, 0.0, bs))
            slices.append(per_bs)
        return TabularModel(2, slices)
    return build


@pytest.fixture
def make_budget_model():
    """One state: "transmit" earns 1 bit for 1 unit of energy, "idle" earns and spends nothing."""
    def build(q=0.5):
        tensor = np.zeros((1, 2, 1))
        tensor[0, 0, 0] = 1.0 - q
        slices = []
        for bs in (0, 1):
            transmit = ActionSlice.from_dense(ActionSpec.transmission(0, 1.0, 2), tensor, 1.0, 1.0, bs)
            idle = ActionSlice.from_dense(ActionSpec.transmission(0, 2.0, 2), tensor, 0.0, 0.0, bs)
            slices.append([transmit, idle])
        return TabularModel(1, slices)
    return build


@pytest.fixture
def toy_joint():
    sbpi = np.array([[0.90, 0.05], [0.0, 0.95]])
    return JointTransitionModel(
        [(0, 0), (1, 1)], sbpi, [blockage_matrix(0.2, 0.1), blockage_matrix(0.2, 0.1)],
        slot_duration=1e-4, entry_pair=(0, 0),
    )


@pytest.fixture
def toy_calibrations():
    return [
        SectoredCalibration(bs, [0, 1], {0: 1e-9, 1: 1e-9}, {0: 2e-9, 1: 2e-9}, {0: 0.0, 1: 0.0}, 0.03, 0.0)
        for bs in (0, 1)
    ]


@pytest.fixture
def toy_params():
    return LinkParams(noise_power=1e-12, symbols=100.0, pilot_fraction=0.05, bandwidth=1e6, slot_duration=1e-4)


@pytest.fixture
def toy_link_model(toy_joint, toy_calibrations, toy_params):
    actions = [enumerate_actions([0, 1], [TOY_SNR], [4, 6], [1], 1) for _ in (0, 1)]
    return LinkModel(toy_joint, toy_calibrations, toy_params, actions)


@pytest.fixture
def toy_fsm():
    return FsmActions(((0, 1), (0, 1)), (TOY_SNR, TOY_SNR), 4, 1)


@pytest.fixture
def toy_context(toy_joint, toy_link_model):
    return LinkContext(ExperimentConfig(), None, toy_joint, toy_link_model)


# ── Registry database ─────────────────────────────────────────────────────────
@pytest.fixture
def db_session():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    init_registry(engine)
    TestingSession = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    db = TestingSession()
    try:
        yield db
    finally:
        db.close()
        engine.dispose()


@pytest.fixture
def client(db_session):
    def override_get_db():
        yield db_session

    app.dependency_overrides[get_db] = override_get_db
    try:
        yield TestClient(app)
    finally:
        app.dependency_overrides.clear()
