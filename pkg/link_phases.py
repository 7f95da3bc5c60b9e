"""Beam-training and data-transmission feedback statistics.

Received-energy statistics are exponential with mean ``a = 1 + SNR·L`` on the
active strongest beam and ``b = 1 + ρ·SNR·L`` elsewhere. With threshold η,
``Σ1 = 1 - exp(-η/a)`` and ``Σ0 = 1 - exp(-η/b)`` are the probabilities that
a single statistic stays below η.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize, special

from errors import ThresholdBracketError

logger = logging.getLogger(__name__)

BRACKET_DECADES = math.log(1e12)


@dataclass(frozen=True)
class Threshold:
    eta: float
    delta: float
    residual: float


@dataclass(frozen=True)
class BtOutcome:
    """Feedback law over Y ∈ {∅} ∪ S_BT for one start condition."""
    n_beams: int
    p_empty: float
    p_detect: float
    p_other: float

    def vector(self, sbpi_position: Optional[int]) -> np.ndarray:
        """Probabilities indexed ``[∅, beam_0, ..., beam_{n-1}]`` in scan order."""
        probs = np.empty(self.n_beams + 1)
        probs[0] = self.p_empty
        probs[1:] = self.p_other
        if sbpi_position is not None:
            probs[1 + sbpi_position] = self.p_detect
        return probs


def _means(snr: float, symbols: float, rho: float):
    return 1.0 + snr * symbols, 1.0 + rho * snr * symbols


def _below(eta: float, mean: float) -> float:
    return -math.expm1(-eta / mean)


def detect_probability(n_beams: int, snr: float, symbols: float, eta: float, rho: float) -> float:
    """P(strongest active statistic exceeds η and every other statistic).

    Integrating the exponential densities gives (b/a)·B(e^{-η/b}; b/a, n), a
    regularized incomplete beta that stays accurate for large scan sets.
    """
    a, b = _means(snr, symbols, rho)
    shape = b / a
    t = math.exp(-eta / b)
    if t == 0.0:
        return 0.0
    log_scale = math.log(shape) + special.betaln(shape, n_beams)
    return float(math.exp(log_scale) * special.betainc(shape, n_beams, t))


def detect_probability_binomial(n_beams: int, snr: float, symbols: float, eta: float, rho: float) -> float:
    """Alternating binomial expansion of the detection probability (small scans only)."""
    a, b = _means(snr, symbols, rho)
    miss1 = math.exp(-eta / a)
    miss0 = math.exp(-eta / b)
    terms = [
        math.comb(n_beams - 1, n) * (-1) ** n * miss1 * miss0 ** n / (1.0 + n * a / b)
        for n in range(n_beams)
    ]
    return math.fsum(terms)


def bt_outcome_distribution(
    n_beams: int,
    snr: float,
    symbols: float,
    eta: float,
    rho: float,
    active: bool,
    sbpi_in_set: bool = True,
) -> BtOutcome:
    if n_beams < 1:
        raise ValueError("beam-training scan set must not be empty")
    a, b = _means(snr, symbols, rho)
    s0 = _below(eta, b)
    if not (active and sbpi_in_set):
        empty = s0 ** n_beams
        other = (1.0 - empty) / n_beams
        return BtOutcome(n_beams, empty, other, other)
    s1 = _below(eta, a)
    empty = s1 * s0 ** (n_beams - 1)
    detect = detect_probability(n_beams, snr, symbols, eta, rho)
    detect = min(max(detect, 0.0), 1.0 - empty)
    other = (1.0 - empty - detect) / (n_beams - 1) if n_beams > 1 else 0.0
    return BtOutcome(n_beams, empty, detect, other)


def _threshold_gap(eta: float, n_beams: int, a: float, b: float) -> float:
    s0 = _below(eta, b)
    s1 = _below(eta, a)
    false_alarm = 1.0 - s0 ** n_beams
    miss = s1 * s0 ** (n_beams - 1)
    return false_alarm - miss


def solve_bt_threshold(snr: float, n_beams: int, symbols: float, rho: float) -> Threshold:
    """Bisect η so that false alarm under inactivity equals the active miss probability."""
    if snr * symbols <= 0.0:
        raise ValueError("SNR·L must be positive")
    if not rho < 1.0:
        raise ValueError("sidelobe ratio must be below 1")
    if n_beams < 1:
        raise ValueError("beam-training scan set must not be empty")
    a, b = _means(snr, symbols, rho)
    upper = a * BRACKET_DECADES
    lo_gap = _threshold_gap(0.0, n_beams, a, b)
    hi_gap = _threshold_gap(upper, n_beams, a, b)
    if lo_gap * hi_gap > 0.0:
        raise ThresholdBracketError(
            "threshold equation has no sign change on the bracket",
            snr=snr, n_beams=n_beams, symbols=symbols, rho=rho,
        )
    eta = optimize.bisect(
        _threshold_gap, 0.0, upper, args=(n_beams, a, b),
        xtol=np.finfo(float).tiny, rtol=4 * np.finfo(float).eps, maxiter=4000,
    )
    residual = abs(_threshold_gap(eta, n_beams, a, b))
    delta = 1.0 - _below(eta, b) ** n_beams
    if residual > 1e-10:
        logger.debug("threshold residual %.3e at snr=%g n=%d", residual, snr, n_beams)
    return Threshold(float(eta), float(delta), float(residual))


def solve_dt_threshold(snr: float, pilot_fraction: float, symbols: float, rho: float) -> Threshold:
    """The DT decision is a single-beam scan over the κ·L pilot symbols."""
    return solve_bt_threshold(snr, 1, pilot_fraction * symbols, rho)


def dt_feedback_distribution(
    snr: float, pilot_fraction: float, symbols: float, eta: float, rho: float, active: bool
) -> np.ndarray:
    """Probabilities ``[P(∅), P(j)]`` of the DT acknowledgement."""
    if pilot_fraction * symbols < 1.0:
        raise ValueError("pilot fraction leaves less than one pilot symbol")
    pilots = pilot_fraction * symbols
    if active:
        empty = _below(eta, 1.0 + pilots * snr)
        return np.array([empty, 1.0 - empty])
    beam = math.exp(-eta / (1.0 + rho * pilots * snr))
    return np.array([1.0 - beam, beam])


# ── Outage and throughput ─────────────────────────────────────────────────────
def outage_probability(rate, snr, bandwidth: float):
    """1 - exp(-(2^{R/W} - 1)/SNR) under Rayleigh fading."""
    snr = np.asarray(snr, dtype=float)
    if np.any(snr <= 0.0):
        raise ValueError("SNR must be positive")
    excess = np.expm1(np.asarray(rate, dtype=float) * math.log(2.0) / bandwidth)
    out = -np.expm1(-excess / snr)
    return float(out) if np.ndim(out) == 0 else out


def epsilon_outage_capacity(snr, epsilon, bandwidth: float):
    """W·log2(1 - SNR·ln(1 - ε))."""
    epsilon = np.asarray(epsilon, dtype=float)
    if np.any((epsilon <= 0.0) | (epsilon >= 1.0)):
        raise ValueError("outage target must lie in (0, 1)")
    rate = bandwidth * np.log1p(-np.asarray(snr, dtype=float) * np.log1p(-epsilon)) / math.log(2.0)
    return float(rate) if np.ndim(rate) == 0 else rate


def throughput(epsilon, snr, pilot_fraction: float, bandwidth: float):
    """(1 - κ)(1 - ε)·C_ε(SNR)."""
    return (1.0 - pilot_fraction) * (1.0 - np.asarray(epsilon)) * epsilon_outage_capacity(snr, epsilon, bandwidth)


def optimal_outage_target(snr: float, pilot_fraction: float, bandwidth: float):
    """Throughput-maximizing ε* and T*(SNR).

    With y = -ln(1 - ε) the stationarity condition reads (1 + SNR·y)·ln(1 + SNR·y) = SNR,
    which changes sign on [0, 1].
    """
    if snr <= 0.0:
        raise ValueError("SNR must be positive")

    def stationarity(y):
        x = snr * y
        return (1.0 + x) * math.log1p(x) - snr

    y = optimize.brentq(stationarity, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    eps = -math.expm1(-y)
    return eps, float(throughput(eps, snr, pilot_fraction, bandwidth))


def link_statistics(
    snr: float,
    symbols: float,
    rho: float,
    pilot_fraction: float,
    bandwidth: float,
    bt_sizes=(1, 2, 4, 8),
) -> dict:
    """Thresholds, feedback laws, ε* and T* at one SNR, as plain JSON data."""
    eps, best = optimal_outage_target(snr, pilot_fraction, bandwidth)
    dt = solve_dt_threshold(snr, pilot_fraction, symbols, rho)
    bt = {}
    for n in bt_sizes:
        thr = solve_bt_threshold(snr, n, symbols, rho)
        active = bt_outcome_distribution(n, snr, symbols, thr.eta, rho, True)
        idle = bt_outcome_distribution(n, snr, symbols, thr.eta, rho, False)
        bt[str(n)] = {
            "eta": thr.eta,
            "delta": thr.delta,
            "residual": thr.residual,
            "active": {"empty": active.p_empty, "detect": active.p_detect, "other_each": active.p_other},
            "inactive": {"empty": idle.p_empty, "each_beam": idle.p_other},
        }
    return {
        "snr": snr,
        "epsilon_opt": eps,
        "throughput_opt_bps": best,
        "rate_bps": epsilon_outage_capacity(snr, eps, bandwidth),
        "dt": {
            "eta": dt.eta,
            "delta": dt.delta,
            "residual": dt.residual,
            "active": dt_feedback_distribution(snr, pilot_fraction, symbols, dt.eta, rho, True).tolist(),
            "inactive": dt_feedback_distribution(snr, pilot_fraction, symbols, dt.eta, rho, False).tolist(),
        },
        "bt": bt,
    }
