"""Bob's decision machinery: statistics, calibration and threshold search."""

import math
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from loguru import logger
from scipy.interpolate import PchipInterpolator

from authsim.channel_model import Hypothesis, SystemParams, TrialSample, draw_trials
from authsim.stats_core import (
    NoncentralChi2,
    RandomStream,
    StreamTag,
    block_counts,
    nc_chi2_quantile,
    parallel_map,
)

SIGMA2_FLOOR = 1e-12
THETA_FLOOR = 1e-12
MIN_EXPECTED_EVENTS = 100


class CalibrationError(RuntimeError):
    """No threshold meets the false-alarm constraint with the available trials."""


class Forger(Protocol):
    def forge(self, h_ae_hat: np.ndarray, h_eb_hat: np.ndarray, params: SystemParams) -> np.ndarray: ...


def _check_sigma2(sigma2) -> np.ndarray:
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.ndim != 1 or not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
        raise ValueError(f"per-channel variances must be finite and positive, got {sigma2}")
    return sigma2


@dataclass(frozen=True)
class LlrRule:
    theta: float
    sigma2_per_channel: tuple[float, ...]

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        object.__setattr__(
            self, "sigma2_per_channel", tuple(_check_sigma2(self.sigma2_per_channel).tolist())
        )


@dataclass(frozen=True)
class CombinedRule:
    theta: float
    epsilon: float
    sigma2_per_channel: tuple[float, ...]

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if math.isnan(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        object.__setattr__(
            self, "sigma2_per_channel", tuple(_check_sigma2(self.sigma2_per_channel).tolist())
        )


Rule = LlrRule | CombinedRule


def sigma2_per_channel(params: SystemParams, mode: str = "true_alpha") -> np.ndarray:
    """Per-dimension variance of the reference/observation difference.

    ``true_alpha`` adds the fading innovation 1 - alpha_n^2; ``flat`` assumes alpha = 1.
    """
    base = params.sigma2_i + params.sigma2_ii
    if mode == "true_alpha":
        sigma2 = base + 1.0 - params.alpha_array**2
    elif mode == "flat":
        sigma2 = np.full(params.n_channels, base)
    else:
        raise ValueError(f"unknown sigma mode {mode!r}")
    return np.maximum(sigma2, SIGMA2_FLOOR)


def llr_statistic(obs: np.ndarray, ref: np.ndarray, sigma2) -> float | np.ndarray:
    """Psi = 2 * sum_n |obs_n - ref_n|^2 / sigma2_n, per row for batches."""
    sigma2 = _check_sigma2(sigma2)
    obs, ref = np.asarray(obs), np.asarray(ref)
    if obs.shape[-1] != sigma2.size or ref.shape[-1] != sigma2.size:
        raise ValueError("obs, ref and sigma2 must have the same number of channels")
    diff = obs - ref
    psi = 2.0 * np.sum((diff.real**2 + diff.imag**2) / sigma2, axis=-1)
    return float(psi) if np.ndim(psi) == 0 else psi


def noncentrality(v: np.ndarray, ref_channel: np.ndarray, sigma2, mode: str) -> float | np.ndarray:
    """Noncentrality of Psi.

    ``mu``: ``v`` holds (alpha_n - 1) h_n and the result is sum |v_n|^2 / sigma2_n.
    ``beta``: ``v`` holds the forgery g and the result is sum |g_n - h_n|^2 / sigma2_n.
    """
    sigma2 = _check_sigma2(sigma2)
    v, ref_channel = np.asarray(v), np.asarray(ref_channel)
    if v.shape[-1] != sigma2.size or ref_channel.shape[-1] != sigma2.size:
        raise ValueError("vectors and sigma2 must have the same number of channels")
    if mode == "mu":
        shift = v
    elif mode == "beta":
        shift = v - ref_channel
    else:
        raise ValueError(f"unknown noncentrality mode {mode!r}")
    value = np.sum(np.abs(shift) ** 2 / sigma2, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def mu_of(h_ab: np.ndarray, params: SystemParams, sigma2) -> float | np.ndarray:
    """H0 noncentrality of a channel realization (or batch of them)."""
    h_ab = np.asarray(h_ab)
    return noncentrality((params.alpha_array - 1.0) * h_ab, h_ab, sigma2, "mu")


def calibrate_llr_threshold(target_pfa: float, mu: float, n_channels: int) -> float:
    if not 0.0 < target_pfa < 1.0:
        raise ValueError(f"target_pfa must lie in (0, 1), got {target_pfa}")
    return nc_chi2_quantile(1.0 - target_pfa, NoncentralChi2(2 * n_channels, mu))


def empirical_llr_threshold(psi_h0: np.ndarray, target_pfa: float) -> float:
    """Smallest pool value leaving at most ``target_pfa`` of the pool above it."""
    psi_h0 = np.asarray(psi_h0, dtype=float)
    if not 0.0 < target_pfa < 1.0:
        raise ValueError(f"target_pfa must lie in (0, 1), got {target_pfa}")
    if psi_h0.size * target_pfa < 1:
        raise CalibrationError(
            f"{psi_h0.size} H0 samples cannot resolve a false-alarm rate of {target_pfa}"
        )
    theta = float(np.quantile(psi_h0, 1.0 - target_pfa, method="higher"))
    return max(theta, THETA_FLOOR)


class LlrThresholdTable:
    """Analytic theta(mu) for one (target_pfa, N), interpolated on a mu grid.

    Inside the grid the table uses monotone cubic interpolation; beyond it
    every threshold is computed exactly.
    """

    def __init__(self, target_pfa: float, n_channels: int, mu_max: float, points: int = 48):
        self.target_pfa = target_pfa
        self.n_channels = n_channels
        self.mu_max = float(mu_max)
        if self.mu_max > 0:
            grid = np.concatenate(([0.0], np.geomspace(self.mu_max * 1e-6, self.mu_max, points)))
        else:
            grid = np.zeros(1)
        values = np.array([calibrate_llr_threshold(target_pfa, m, n_channels) for m in grid])
        self._grid = grid
        self._values = values
        self._interp = PchipInterpolator(grid, values) if grid.size > 1 else None

    def __call__(self, mu) -> np.ndarray:
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if self._interp is None:
            theta = np.full(mu.shape, self._values[0])
        else:
            theta = self._interp(np.clip(mu, 0.0, self.mu_max))
        outside = mu > self.mu_max
        for idx in np.flatnonzero(outside):
            theta[idx] = calibrate_llr_threshold(self.target_pfa, float(mu[idx]), self.n_channels)
        return theta


def modulus_statistic(obs: np.ndarray, ref: np.ndarray) -> float | np.ndarray:
    """Gamma = sum_n (|ref_n| - |obs_n|), per row for batches."""
    obs, ref = np.asarray(obs), np.asarray(ref)
    if obs.shape[-1] != ref.shape[-1]:
        raise ValueError("obs and ref must have the same number of channels")
    gamma = np.sum(np.abs(ref) - np.abs(obs), axis=-1)
    return float(gamma) if np.ndim(gamma) == 0 else gamma


def accept_mask(psi, gamma, rule: Rule, theta=None) -> np.ndarray:
    """Vectorized decision: True where H0 is accepted.

    ``theta`` overrides the rule's threshold, per trial when an array is given.
    """
    theta = rule.theta if theta is None else theta
    accept = np.asarray(psi) <= theta
    if isinstance(rule, CombinedRule) and not math.isinf(rule.epsilon):
        gamma = np.asarray(gamma)
        accept &= (gamma >= -rule.epsilon) & (gamma <= rule.epsilon)
    return accept


def decide(psi: float, gamma: float, rule: Rule) -> Hypothesis:
    return Hypothesis.H0 if bool(accept_mask(psi, gamma, rule)) else Hypothesis.H1


@dataclass(frozen=True)
class PoolTask:
    params: SystemParams
    stream: RandomStream
    size: int
    truth: Hypothesis
    attack: Forger | None
    sigma2: tuple[float, ...]
    mu_source: str | None = None
    h_ab: np.ndarray | None = None
    reference: np.ndarray | None = None


@dataclass
class StatisticPool:
    psi: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.psi.size


def statistics_of(sample: TrialSample, sigma2, mu_source: str | None, params: SystemParams) -> StatisticPool:
    psi = llr_statistic(sample.observation, sample.h_ab_hat, sigma2)
    gamma = modulus_statistic(sample.observation, sample.h_ab_hat)
    mu = None
    if mu_source == "genie":
        mu = mu_of(sample.h_ab, params, sigma2)
    elif mu_source == "plugin":
        mu = mu_of(sample.h_ab_hat, params, sigma2)
    elif mu_source is not None:
        raise ValueError(f"unknown mu source {mu_source!r}")
    return StatisticPool(np.atleast_1d(psi), np.atleast_1d(gamma), None if mu is None else np.atleast_1d(mu))


def _run_pool_task(task: PoolTask) -> StatisticPool:
    forge = None
    if task.attack is not None:
        attack, params = task.attack, task.params
        forge = lambda h_ae, h_eb: attack.forge(h_ae, h_eb, params)  # noqa: E731
    sample = draw_trials(
        task.params,
        task.stream,
        task.size,
        task.truth,
        forge=forge,
        h_ab=task.h_ab,
        reference=task.reference,
    )
    return statistics_of(sample, task.sigma2, task.mu_source, task.params)


def _concat(parts: list[StatisticPool]) -> StatisticPool:
    if not parts:
        return StatisticPool(np.empty(0), np.empty(0))
    mu = None if parts[0].mu is None else np.concatenate([p.mu for p in parts])
    return StatisticPool(
        np.concatenate([p.psi for p in parts]),
        np.concatenate([p.gamma for p in parts]),
        mu,
    )


def statistic_blocks(
    params: SystemParams,
    size: int,
    stream: RandomStream,
    truth: Hypothesis,
    attack: Forger | None = None,
    sigma2=None,
    workers: int = 1,
    block_size: int = 8192,
    mu_source: str | None = None,
    h_ab: np.ndarray | None = None,
    reference: np.ndarray | None = None,
) -> StatisticPool:
    """Draw ``size`` trials block-wise on disjoint substreams and reduce them in block order."""
    sigma2 = sigma2_per_channel(params) if sigma2 is None else _check_sigma2(sigma2)
    tasks = [
        PoolTask(
            params=params,
            stream=stream.substream(b),
            size=count,
            truth=truth,
            attack=attack,
            sigma2=tuple(sigma2.tolist()),
            mu_source=mu_source,
            h_ab=h_ab,
            reference=reference,
        )
        for b, count in enumerate(block_counts(size, block_size))
    ]
    return _concat(parallel_map(_run_pool_task, tasks, workers))


def statistic_pool(
    params: SystemParams,
    size: int,
    stream: RandomStream,
    truth: Hypothesis,
    attack: Forger | None = None,
    sigma2=None,
    workers: int = 1,
    block_size: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    pool = statistic_blocks(params, size, stream, truth, attack, sigma2, workers, block_size)
    return pool.psi, pool.gamma


@dataclass(frozen=True)
class LlrCalibration:
    """A calibrated LLR test: a base rule plus, for genie/plug-in mu, per-trial thresholds."""

    rule: LlrRule
    mode: str
    table: LlrThresholdTable | None = field(default=None, compare=False)
    empirical_pfa: float | None = None

    def thresholds(self, pool: StatisticPool) -> float | np.ndarray:
        if self.table is None or pool.mu is None:
            return self.rule.theta
        return self.table(pool.mu)


def calibrate_llr_rule(
    params: SystemParams,
    target_pfa: float,
    stream: RandomStream,
    *,
    mode: str = "auto",
    sigma_mode: str = "true_alpha",
    mu_source: str = "genie",
    trials: int = 1_000_000,
    fa_band: tuple[float, float] = (0.5, 2.0),
    workers: int = 1,
    block_size: int = 8192,
    h_ab: np.ndarray | None = None,
    reference: np.ndarray | None = None,
) -> LlrCalibration:
    """Calibrate the LLR threshold analytically, by H0 sampling, or analytically with a sampled check.

    In ``auto`` mode the analytic thresholds are checked on an H0 pool and replaced by
    the pool's empirical quantile when the observed false-alarm rate leaves
    ``fa_band`` (multiples of the target).
    """
    if mode not in ("analytic", "mc", "auto"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    sigma2 = sigma2_per_channel(params, sigma_mode)
    n = params.n_channels
    flat = bool(np.all(params.alpha_array == 1.0))

    def analytic(mu_values: np.ndarray | None) -> LlrCalibration:
        if flat or mu_values is None:
            theta = calibrate_llr_threshold(target_pfa, 0.0, n)
            return LlrCalibration(LlrRule(theta, tuple(sigma2.tolist())), "analytic")
        table = LlrThresholdTable(target_pfa, n, float(np.quantile(mu_values, 0.999)))
        theta = float(table(np.median(mu_values))[0])
        return LlrCalibration(LlrRule(theta, tuple(sigma2.tolist())), "analytic", table)

    if mode == "analytic" and flat:
        return analytic(None)

    if mode != "analytic" and trials * target_pfa < MIN_EXPECTED_EVENTS:
        raise CalibrationError(
            f"{trials} calibration trials give fewer than {MIN_EXPECTED_EVENTS} expected "
            f"false alarms at target {target_pfa}"
        )

    started = time.perf_counter()
    pool = statistic_blocks(
        params,
        trials,
        stream.substream(StreamTag.CALIBRATION),
        Hypothesis.H0,
        sigma2=sigma2,
        workers=workers,
        block_size=block_size,
        mu_source=mu_source,
        h_ab=h_ab,
        reference=reference,
    )

    if mode in ("analytic", "auto"):
        calibration = analytic(pool.mu)
        pfa = float(np.mean(pool.psi > calibration.thresholds(pool)))
        if mode == "analytic" or fa_band[0] * target_pfa <= pfa <= fa_band[1] * target_pfa:
            return LlrCalibration(calibration.rule, "analytic", calibration.table, pfa)
        logger.bind(target_pfa=target_pfa, observed_pfa=pfa).warning("llr_calibration_fallback")

    theta = empirical_llr_threshold(pool.psi, target_pfa)
    pfa = float(np.mean(pool.psi > theta))
    logger.bind(
        theta=theta,
        pfa=pfa,
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("llr_calibrated_mc")
    return LlrCalibration(LlrRule(theta, tuple(sigma2.tolist())), "mc", None, pfa)


def epsilon_grid(n_channels: int, points: int = 40, span: tuple[float, float] = (1e-3, 1e2)) -> np.ndarray:
    """Geometric modulus-gate grid scaled by sqrt(N), closed by +inf."""
    scale = math.sqrt(n_channels)
    return np.append(np.geomspace(span[0] * scale, span[1] * scale, points), np.inf)


def _smallest_feasible_theta(psi_sorted: np.ndarray, total: int, target_pfa: float, rel_tol: float) -> float | None:
    """Bisect for the smallest theta whose false-alarm rate stays at or below the target.

    ``psi_sorted`` holds the sorted H0 statistics that pass the modulus gate; the
    remaining ``total - len(psi_sorted)`` trials are rejected for any theta.
    """
    allowed = target_pfa * total

    def false_alarms(theta: float) -> int:
        return total - int(np.searchsorted(psi_sorted, theta, side="right"))

    if psi_sorted.size == 0 or false_alarms(psi_sorted[-1]) > allowed:
        return None
    lo, hi = THETA_FLOOR, max(float(psi_sorted[-1]), THETA_FLOOR)
    if false_alarms(lo) <= allowed:
        return lo
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if false_alarms(mid) <= allowed:
            hi = mid
        else:
            lo = mid
    return hi


def optimize_thresholds(
    params: SystemParams,
    target_pfa: float,
    attack: Forger,
    mc_budget: int,
    stream: RandomStream,
    *,
    sigma2=None,
    workers: int = 1,
    block_size: int = 8192,
    epsilon_points: int = 40,
    epsilon_span: tuple[float, float] = (1e-3, 1e2),
    theta_rel_tol: float = 1e-3,
) -> CombinedRule:
    """Search (theta, epsilon) minimizing the missed-detection rate at the false-alarm target.

    For every epsilon on the grid, theta is bisected on a shared H0 pool; missed
    detections are counted on a shared H1 pool forged by ``attack``. Ties on the
    missed-detection count go to the larger epsilon.
    """
    if not 0.0 < target_pfa < 1.0:
        raise ValueError(f"target_pfa must lie in (0, 1), got {target_pfa}")
    if target_pfa * mc_budget < MIN_EXPECTED_EVENTS:
        raise CalibrationError(
            f"budget {mc_budget} gives fewer than {MIN_EXPECTED_EVENTS} expected false alarms "
            f"at target {target_pfa}"
        )
    sigma2 = sigma2_per_channel(params) if sigma2 is None else _check_sigma2(sigma2)
    started = time.perf_counter()

    psi0, gamma0 = statistic_pool(
        params, mc_budget, stream.substream(StreamTag.H0_POOL), Hypothesis.H0,
        sigma2=sigma2, workers=workers, block_size=block_size,
    )
    psi1, gamma1 = statistic_pool(
        params, mc_budget, stream.substream(StreamTag.H1_POOL), Hypothesis.H1,
        attack=attack, sigma2=sigma2, workers=workers, block_size=block_size,
    )

    order = np.argsort(psi0, kind="stable")
    psi0, gamma0 = psi0[order], gamma0[order]
    abs_gamma0, abs_gamma1 = np.abs(gamma0), np.abs(gamma1)

    best: tuple[int, float, float] | None = None
    for epsilon in epsilon_grid(params.n_channels, epsilon_points, epsilon_span):
        theta = _smallest_feasible_theta(
            psi0[abs_gamma0 <= epsilon], psi0.size, target_pfa, theta_rel_tol
        )
        if theta is None:
            continue
        missed = int(np.count_nonzero((psi1 <= theta) & (abs_gamma1 <= epsilon)))
        if best is None or missed <= best[0]:
            best = (missed, theta, float(epsilon))

    if best is None:
        raise CalibrationError(
            f"no (theta, epsilon) couple meets false-alarm target {target_pfa} "
            f"with {mc_budget} trials"
        )

    missed, theta, epsilon = best
    logger.bind(
        theta=theta,
        epsilon=epsilon,
        pmd=missed / psi1.size,
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("thresholds_optimized")
    return CombinedRule(theta, epsilon, tuple(sigma2.tolist()))
