"""Beam codebooks, strongest-beam-pair regions and sectored calibration.

BPIs are 0-based: BPI j of BS I pairs BS beam ``j // |F|`` with UE beam
``j % |F|``.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from channel import SceneGeometry, array_gain, los_angles, los_angles_many, pathloss, upa_response
from config import linear_to_db
from errors import ConfigError, EmptyCoverage
from schemas import ArraysConfig

logger = logging.getLogger(__name__)


@dataclass
class JointCodebook:
    bs_codewords: List[np.ndarray]
    ue_codewords: np.ndarray
    bs_arrays: List
    ue_array: object
    sbpi_sets: List[List[int]] = field(default_factory=lambda: [[], []])

    @property
    def ue_beams(self) -> int:
        return self.ue_codewords.shape[0]

    def bs_beams(self, bs_index: int) -> int:
        return self.bs_codewords[bs_index].shape[0]

    def n_bpi(self, bs_index: int) -> int:
        return self.bs_beams(bs_index) * self.ue_beams

    def beam_indices(self, bs_index: int, bpi: int) -> Tuple[int, int]:
        return divmod(int(bpi), self.ue_beams)

    def codeword_pair(self, bs_index: int, bpi: int) -> Tuple[np.ndarray, np.ndarray]:
        i, k = self.beam_indices(bs_index, bpi)
        return self.bs_codewords[bs_index][i], self.ue_codewords[k]

    def gain_table(self, scene: SceneGeometry, bs_index: int, positions: np.ndarray):
        """G_tx·G_rx for every position and BPI plus the LOS distances."""
        aod_az, aod_el, aoa_az, aoa_el, distance = los_angles_many(scene, bs_index, positions)
        bs_array = self.bs_arrays[bs_index]
        g_tx = array_gain(self.bs_codewords[bs_index], upa_response(aod_az, aod_el, bs_array), bs_array.size)
        g_rx = array_gain(self.ue_codewords, upa_response(aoa_az, aoa_el, self.ue_array), self.ue_array.size)
        gains = (g_tx[..., :, None] * g_rx[..., None, :]).reshape(g_tx.shape[:-1] + (-1,))
        return gains, distance


def _centerline_target(scene: SceneGeometry, bs_index: int, azimuth: float, seen_from_ue: bool) -> np.ndarray:
    """Point on the road centerline hit by a ray of the given azimuth.

    From the BS the ray starts at the BS; from the UE side the azimuth is the
    arrival direction towards the BS, so the UE sits where that ray back-projects.
    """
    bs = scene.bs_position(bs_index)
    x_ue = float(scene.lane_offset(0.5 * (scene.lane_count - 1)))
    if seen_from_ue:
        t = (bs[0] - x_ue) / np.sin(azimuth)
        y = bs[1] - t * np.cos(azimuth)
    else:
        t = (x_ue - bs[0]) / np.sin(azimuth)
        y = bs[1] + t * np.cos(azimuth)
    return np.array([x_ue, y, scene.ue_height])


def _arc_centers(start: float, stop: float, count: int) -> np.ndarray:
    edges = np.linspace(start, stop, count + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def build_codebooks(scene: SceneGeometry, arrays: ArraysConfig, bs_beams: int, ue_beams: int) -> JointCodebook:
    if scene.segment_length <= 0.0:
        raise EmptyCoverage("road segment has zero length")
    if bs_beams < 1 or ue_beams < 1:
        raise ValueError("beam counts must be at least 1")
    start = scene.ue_position(0.0, 0.5 * (scene.lane_count - 1))
    stop = scene.ue_position(scene.segment_length, 0.5 * (scene.lane_count - 1))

    bs_codewords = []
    for bs_index in (0, 1):
        first = los_angles(scene, bs_index, start).aod_azimuth
        last = los_angles(scene, bs_index, stop).aod_azimuth
        words = []
        for azimuth in _arc_centers(first, last, bs_beams):
            target = _centerline_target(scene, bs_index, azimuth, seen_from_ue=False)
            angles = los_angles(scene, bs_index, target)
            words.append(upa_response(angles.aod_azimuth, angles.aod_elevation, arrays.bs[bs_index]))
        bs_codewords.append(np.array(words))

    # yz-plane arrays respond to cos(azimuth) only, so UE beams aimed at BS 0
    # serve the mirrored directions towards BS 1 as well
    first = los_angles(scene, 0, start).aoa_azimuth
    last = los_angles(scene, 0, stop).aoa_azimuth
    ue_words = []
    for azimuth in _arc_centers(first, last, ue_beams):
        target = _centerline_target(scene, 0, azimuth, seen_from_ue=True)
        angles = los_angles(scene, 0, target)
        ue_words.append(upa_response(angles.aoa_azimuth, angles.aoa_elevation, arrays.ue))

    codebook = JointCodebook(bs_codewords, np.array(ue_words), list(arrays.bs), arrays.ue)
    logger.info("codebooks built: %d BS beams x %d UE beams per BS", bs_beams, ue_beams)
    return codebook


def sbpi_map(ue_position: Sequence[float], bs_index: int, codebook: JointCodebook, scene: SceneGeometry) -> int:
    gains, _ = codebook.gain_table(scene, bs_index, np.asarray(ue_position, dtype=float)[None, :])
    return int(np.argmax(gains[0]))


# ── Coverage grid ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class CoverageGrid:
    spacing: float
    along_road: np.ndarray
    lane_count: int

    @classmethod
    def for_scene(cls, scene: SceneGeometry, spacing: float) -> "CoverageGrid":
        if scene.segment_length <= 0.0:
            raise EmptyCoverage("road segment has zero length")
        n = int(np.floor(scene.segment_length / spacing + 1e-9)) + 1
        return cls(spacing, np.arange(n) * spacing, scene.lane_count)

    def positions(self, scene: SceneGeometry) -> np.ndarray:
        """Shape (lane_count, n_points, 3)."""
        lanes = np.arange(self.lane_count)[:, None]
        return scene.ue_position(np.broadcast_to(self.along_road, (self.lane_count, self.along_road.size)), lanes)

    def index(self, y):
        idx = np.rint(np.asarray(y, dtype=float) / self.spacing).astype(int)
        return np.clip(idx, 0, self.along_road.size - 1)


@dataclass
class SbpiTable:
    """Strongest BPI per (BS, lane, grid point) for fast trajectory labelling."""
    grid: CoverageGrid
    table: np.ndarray  # (2, lane_count, n_points)

    def lookup(self, bs_index: int, y, lane):
        return self.table[bs_index, np.asarray(lane, dtype=int), self.grid.index(y)]

    def pair(self, y, lane):
        idx = self.grid.index(y)
        lane = np.asarray(lane, dtype=int)
        return self.table[0, lane, idx], self.table[1, lane, idx]


# ── Sectored calibration ──────────────────────────────────────────────────────
@dataclass
class SectoredCalibration:
    bs_index: int
    sbpi_set: List[int]
    upsilon: Dict[int, float]
    peak_ratio: Dict[int, float]
    sidelobe_gain: Dict[int, float]
    rho: float
    diffuse_variance: float
    rho_override: Optional[float] = None

    @property
    def rho_model(self) -> float:
        return self.rho if self.rho_override is None else self.rho_override

    @property
    def rho_source(self) -> str:
        return "calibrated" if self.rho_override is None else "configured"

    def to_dict(self, codebook: Optional[JointCodebook] = None) -> dict:
        data = {
            "bs_index": self.bs_index,
            "sbpi_set": list(self.sbpi_set),
            "upsilon_db": {str(j): linear_to_db(self.upsilon[j]) for j in self.sbpi_set},
            "peak_ratio_db": {str(j): linear_to_db(self.peak_ratio[j]) for j in self.sbpi_set},
            "sidelobe_gain": {str(j): self.sidelobe_gain[j] for j in self.sbpi_set},
            "rho_db": linear_to_db(self.rho) if self.rho > 0 else None,
            "rho_override_db": None if self.rho_override is None else linear_to_db(self.rho_override),
            "diffuse_variance": self.diffuse_variance,
        }
        if codebook is not None:
            data["bpi_map"] = {str(j): list(codebook.beam_indices(self.bs_index, j)) for j in self.sbpi_set}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SectoredCalibration":
        def lin(db):
            return 0.0 if db is None else 10.0 ** (db / 10.0)

        sbpi = [int(j) for j in data["sbpi_set"]]
        override = data.get("rho_override_db")
        return cls(
            bs_index=int(data["bs_index"]),
            sbpi_set=sbpi,
            upsilon={j: lin(data["upsilon_db"][str(j)]) for j in sbpi},
            peak_ratio={j: lin(data["peak_ratio_db"][str(j)]) for j in sbpi},
            sidelobe_gain={j: float(data["sidelobe_gain"][str(j)]) for j in sbpi},
            rho=lin(data["rho_db"]),
            diffuse_variance=float(data["diffuse_variance"]),
            rho_override=None if override is None else lin(override),
        )


def calibrate_from_gains(
    bs_index: int,
    gains: np.ndarray,
    loss: np.ndarray,
    along_road: np.ndarray,
    lanes: np.ndarray,
    diffuse_variance: float,
    guard: float = 0.0,
    rho_override: Optional[float] = None,
) -> SectoredCalibration:
    """Calibrate from flat per-position tables (gains: n_pos x n_bpi)."""
    ratio = gains / loss[:, None]
    sbpi = np.argmax(gains, axis=1)
    aligned_ids = np.unique(sbpi)

    upsilon, peak, sidelobe, centroid = {}, {}, {}, {}
    rho = 0.0
    for j in aligned_ids:
        j = int(j)
        aligned = sbpi == j
        upsilon[j] = float(ratio[aligned, j].min())
        peak[j] = float(ratio[aligned, j].max())
        centroid[j] = float(along_road[aligned].mean())

        # misaligned positions outside the guard band around j's own region
        eligible = ~aligned
        if guard > 0.0:
            for lane in np.unique(lanes):
                in_lane = lanes == lane
                own = along_road[in_lane & aligned]
                if own.size == 0:
                    continue
                gap = np.abs(along_road[in_lane][:, None] - own[None, :]).min(axis=1)
                eligible[np.flatnonzero(in_lane)[gap <= guard]] = False
        if upsilon[j] <= 0.0 and diffuse_variance <= 0.0:
            raise ValueError(f"BPI {j} has zero aligned gain")
        if np.any(eligible):
            sidelobe[j] = float(gains[eligible, j].max())
            worst = (ratio[eligible, j].max() + diffuse_variance) / (upsilon[j] + diffuse_variance)
            rho = max(rho, float(worst))
        else:
            sidelobe[j] = 0.0

    order = sorted(centroid, key=lambda j: (centroid[j], j))
    if rho >= 1.0:
        logger.warning("BS %d: geometric sidelobe ratio %.2f dB is not below 0 dB", bs_index, linear_to_db(rho))
    return SectoredCalibration(bs_index, order, upsilon, peak, sidelobe, rho, diffuse_variance, rho_override)


def model_sidelobe_ratio(calibration: SectoredCalibration) -> float:
    """ρ the sectored model runs with; rejects values at or above 0 dB."""
    rho = calibration.rho_model
    logger.info(
        "BS %d: sectored model uses %s rho %.2f dB (calibrated %.2f dB)",
        calibration.bs_index, calibration.rho_source, linear_to_db(rho), linear_to_db(calibration.rho),
    )
    if rho >= 1.0:
        raise ConfigError(
            "sidelobe ratio is not below 0 dB; set codebook.sidelobe_guard or codebook.rho_db",
            bs_index=calibration.bs_index, rho_db=linear_to_db(rho), source=calibration.rho_source,
        )
    return rho


def calibrate_sectored(
    codebook: JointCodebook,
    grid: CoverageGrid,
    scene: SceneGeometry,
    diffuse_variance: Sequence[float],
    guard: float = 0.0,
    rho_override: Optional[float] = None,
) -> Tuple[List[SectoredCalibration], SbpiTable]:
    """Calibrate both BSs over the grid and fill ``codebook.sbpi_sets``."""
    positions = grid.positions(scene)
    flat = positions.reshape(-1, 3)
    lanes = np.repeat(np.arange(grid.lane_count), grid.along_road.size)
    along = np.tile(grid.along_road, grid.lane_count)

    calibrations, tables = [], []
    for bs_index in (0, 1):
        gains, distance = codebook.gain_table(scene, bs_index, flat)
        loss = pathloss(distance, scene.wavelength)
        cal = calibrate_from_gains(
            bs_index, gains, loss, along, lanes, diffuse_variance[bs_index], guard, rho_override
        )
        calibrations.append(cal)
        codebook.sbpi_sets[bs_index] = list(cal.sbpi_set)
        tables.append(np.argmax(gains, axis=1).reshape(grid.lane_count, grid.along_road.size))
        logger.info("BS %d calibrated: |S_I|=%d of %d BPIs", bs_index, len(cal.sbpi_set), codebook.n_bpi(bs_index))
        model_sidelobe_ratio(cal)
    return calibrations, SbpiTable(grid, np.stack(tables))


def power_for_target_snr(snr: float, bpi: int, calibration: SectoredCalibration, noise_power: float) -> float:
    """P = σ_w²·SNR/(Υ_j + σ_DIF²)."""
    if snr < 0.0:
        raise ValueError("target SNR must be nonnegative")
    return noise_power * snr / (calibration.upsilon[bpi] + calibration.diffuse_variance)
