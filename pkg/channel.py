"""Road scene, planar-array responses, pathloss and average SNR.

Frame: the road runs along +y, x is lateral (BS 0 at x = -D, BS 1 at x = +D,
both abeam of the segment midpoint) and z is up. Azimuth is measured in the
horizontal plane from +y towards +x, elevation from the horizontal plane.
All arrays lie in the yz-plane: rows stack along z, columns along y.
"""
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from config import SPEED_OF_LIGHT, db_to_linear, dbm_to_watts
from errors import GeometryError
from schemas import ArrayConfig, ExperimentConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneGeometry:
    segment_length: float
    lane_count: int
    lane_separation: float
    bs_distance: float
    bs_height: float
    ue_height: float
    carrier_frequency: float

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "SceneGeometry":
        s = config.scene
        return cls(
            segment_length=s.segment_length,
            lane_count=s.lane_count,
            lane_separation=s.lane_separation,
            bs_distance=s.bs_distance,
            bs_height=s.bs_height,
            ue_height=s.ue_height,
            carrier_frequency=s.carrier_frequency,
        )

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    def bs_position(self, bs_index: int) -> np.ndarray:
        side = -1.0 if bs_index == 0 else 1.0
        return np.array([side * self.bs_distance, 0.5 * self.segment_length, self.bs_height])

    def lane_offset(self, lane) -> np.ndarray:
        lane = np.asarray(lane, dtype=float)
        return (lane - 0.5 * (self.lane_count - 1)) * self.lane_separation

    def ue_position(self, y, lane) -> np.ndarray:
        """Positions for scalar or array (y, lane); the last axis is (x, y, z)."""
        y = np.asarray(y, dtype=float)
        x = np.broadcast_to(self.lane_offset(lane), y.shape)
        z = np.full(y.shape, self.ue_height)
        return np.stack([x, y, z], axis=-1)

    def contains(self, y: float) -> bool:
        return 0.0 <= y <= self.segment_length


@dataclass(frozen=True)
class ChannelParams:
    noise_psd_dbm_hz: float
    bandwidth: float
    noise_figure_db: float
    diffuse_variance: Tuple[float, float]

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "ChannelParams":
        c = config.channel
        diffuse = tuple(0.0 if v is None else db_to_linear(v) for v in c.diffuse_variance_db)
        return cls(c.noise_psd_dbm_hz, c.bandwidth, c.noise_figure_db, diffuse)

    @property
    def noise_power(self) -> float:
        """σ_w² = (1 + F)·N_0·W in watts, F and N_0 linear."""
        n0 = dbm_to_watts(self.noise_psd_dbm_hz)
        return (1.0 + db_to_linear(self.noise_figure_db)) * n0 * self.bandwidth


@dataclass(frozen=True)
class LosAngles:
    aod_azimuth: float
    aod_elevation: float
    aoa_azimuth: float
    aoa_elevation: float


def _direction_angles(vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    vx, vy, vz = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.arctan2(vx, vy), np.arctan2(vz, np.hypot(vx, vy))


def upa_response(azimuth, elevation, config: ArrayConfig) -> np.ndarray:
    """Unit-norm response of a yz-plane array; broadcasts over angle arrays."""
    azimuth = np.asarray(azimuth, dtype=float)
    elevation = np.asarray(elevation, dtype=float)
    k = 2.0 * np.pi * config.spacing
    u_col = np.cos(elevation) * np.cos(azimuth)
    u_row = np.sin(elevation)
    rows = np.exp(1j * k * u_row[..., None] * np.arange(config.rows))
    cols = np.exp(1j * k * u_col[..., None] * np.arange(config.cols))
    # kron over the trailing axis: element (m, n) sits at m*cols + n
    response = (rows[..., :, None] * cols[..., None, :]).reshape(azimuth.shape + (config.size,))
    return response / math.sqrt(config.size)


def los_angles(scene: SceneGeometry, bs_index: int, ue_position: Sequence[float]) -> LosAngles:
    ue = np.asarray(ue_position, dtype=float)
    ray = ue - scene.bs_position(bs_index)
    if np.linalg.norm(ray) == 0.0:
        raise GeometryError("BS and UE positions coincide", bs_index=bs_index)
    aod_az, aod_el = _direction_angles(ray)
    aoa_az, aoa_el = _direction_angles(-ray)
    return LosAngles(float(aod_az), float(aod_el), float(aoa_az), float(aoa_el))


def los_angles_many(scene: SceneGeometry, bs_index: int, ue_positions: np.ndarray):
    """Vectorized los_angles returning (aod_az, aod_el, aoa_az, aoa_el, distance) arrays."""
    ray = np.asarray(ue_positions, dtype=float) - scene.bs_position(bs_index)
    distance = np.linalg.norm(ray, axis=-1)
    if np.any(distance == 0.0):
        raise GeometryError("BS and UE positions coincide", bs_index=bs_index)
    aod_az, aod_el = _direction_angles(ray)
    aoa_az, aoa_el = _direction_angles(-ray)
    return aod_az, aod_el, aoa_az, aoa_el, distance


def array_gain(codewords: np.ndarray, responses: np.ndarray, size: int) -> np.ndarray:
    """M·|dᴴc|² for every (response, codeword) pair, shape (..., n_codewords)."""
    inner = responses.conj() @ np.atleast_2d(codewords).T
    return size * np.abs(inner) ** 2


def beamforming_gain(
    codeword_pair: Tuple[np.ndarray, np.ndarray],
    ue_position: Sequence[float],
    bs_index: int,
    scene: SceneGeometry,
    bs_array: ArrayConfig,
    ue_array: ArrayConfig,
) -> Tuple[float, float]:
    c, f = codeword_pair
    angles = los_angles(scene, bs_index, ue_position)
    d_tx = upa_response(angles.aod_azimuth, angles.aod_elevation, bs_array)
    d_rx = upa_response(angles.aoa_azimuth, angles.aoa_elevation, ue_array)
    g_tx = bs_array.size * abs(np.vdot(d_tx, c)) ** 2
    g_rx = ue_array.size * abs(np.vdot(d_rx, f)) ** 2
    return float(g_tx), float(g_rx)


def pathloss(distance, wavelength: float):
    """ℓ = (4πd/λ)²."""
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("pathloss distance must be positive")
    loss = (4.0 * np.pi * d / wavelength) ** 2
    return float(loss) if loss.ndim == 0 else loss


def average_snr(power, g_tx, g_rx, loss, blockage, diffuse_variance: float, noise_power: float):
    """SNR averaged over fading: (P/σ_w²)·[B·G_tx·G_rx/ℓ + σ_DIF²]."""
    if np.any(np.asarray(power) < 0.0):
        raise ValueError("transmit power must be nonnegative")
    return power / noise_power * (blockage * g_tx * g_rx / loss + diffuse_variance)


def sample_received_power(
    snr: float,
    symbols: float,
    rng: np.random.Generator,
    active: bool = True,
    rho: float = 0.0,
    size=None,
):
    """Matched-filter statistic Γ ~ Exp with mean 1 + SNR·L (active) or 1 + ρ·SNR·L."""
    effective = snr if active else rho * snr
    return rng.exponential(1.0 + effective * symbols, size=size)
