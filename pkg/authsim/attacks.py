"""Eve's forgery strategies and the search for the combined-attack exponent."""

import math
import time
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np
from loguru import logger

from authsim.channel_model import Hypothesis, SystemParams, draw_trials
from authsim.detectors import CombinedRule, LlrRule, accept_mask, llr_statistic, modulus_statistic
from authsim.stats_core import RandomStream, StreamTag, block_counts, parallel_map

_SINGULAR_TOL = 1e-12


class AttackError(ValueError):
    pass


class AttackKind(StrEnum):
    LLR = "llr_attack"
    EXPONENT = "exponent_attack"


@dataclass(frozen=True)
class AttackStrategy:
    kind: AttackKind
    x: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not -1.0 <= self.x <= 1.0:
            raise ValueError(f"exponent x must lie in [-1, 1], got {self.x}")

    @classmethod
    def llr(cls) -> "AttackStrategy":
        return cls(AttackKind.LLR)

    @classmethod
    def exponent(cls, x: float) -> "AttackStrategy":
        return cls(AttackKind.EXPONENT, float(x))

    @classmethod
    def modulus(cls) -> "AttackStrategy":
        return cls(AttackKind.EXPONENT, -1.0)

    @property
    def label(self) -> str:
        if self.kind is AttackKind.LLR:
            return "llr"
        return f"exponent(x={self.x:g})"

    def forge(self, h_ae_hat: np.ndarray, h_eb_hat: np.ndarray, params: SystemParams) -> np.ndarray:
        if self.kind is AttackKind.LLR:
            return llr_attack(h_ae_hat, h_eb_hat, params)
        return exponent_attack(h_ae_hat, params.rho_ae, self.x)


def llr_coefficients(params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel weights (C, D) of the ML forgery g = C * h_eb_hat + D * h_ae_hat."""
    lam = params.power_delay_array
    with np.errstate(divide="ignore", invalid="ignore"):
        omega_ae = 1.0 + params.sigma2_ae / lam
        omega_eb = 1.0 + params.sigma2_eb / lam
    denominator = omega_ae * omega_eb - params.rho_ab**2

    singular = ~np.isfinite(denominator) | (np.abs(denominator) < _SINGULAR_TOL)
    if np.any(singular):
        n = int(np.flatnonzero(singular)[0])
        raise AttackError(f"LLR attack is undefined on channel {n}: singular denominator")

    c = (params.rho_eb * omega_eb - params.rho_ab * params.rho_ae) / denominator
    d = (params.rho_ae * omega_ae - params.rho_ab * params.rho_eb) / denominator
    return c, d


def llr_attack(h_ae_hat: np.ndarray, h_eb_hat: np.ndarray, params: SystemParams) -> np.ndarray:
    h_ae_hat, h_eb_hat = np.asarray(h_ae_hat), np.asarray(h_eb_hat)
    if h_ae_hat.shape[-1] != params.n_channels or h_eb_hat.shape[-1] != params.n_channels:
        raise ValueError(f"Eve's estimates must have {params.n_channels} channels")
    c, d = llr_coefficients(params)
    return h_eb_hat * c + h_ae_hat * d


def exponent_attack(h_ae_hat: np.ndarray, rho_ae: float, x: float) -> np.ndarray:
    """Scale Eve's estimate by rho_ae ** x; x = -1 is the modulus attack."""
    if not -1.0 <= x <= 1.0:
        raise ValueError(f"exponent x must lie in [-1, 1], got {x}")
    if rho_ae < 0:
        raise ValueError(f"rho_ae must be nonnegative, got {rho_ae}")
    if rho_ae == 0 and x < 0:
        raise AttackError("exponent attack with x < 0 needs rho_ae != 0")
    return rho_ae**x * np.asarray(h_ae_hat)


def exponent_grid(step: float) -> np.ndarray:
    count = 2.0 / step
    if step <= 0 or abs(count - round(count)) > 1e-9:
        raise ValueError(f"grid step must divide 2 evenly, got {step}")
    return np.round(np.arange(-1.0, 1.0 + step / 2, step), 10)


@dataclass(frozen=True)
class _ExponentTask:
    params: SystemParams
    rule: LlrRule | CombinedRule
    grid: tuple[float, ...]
    stream: RandomStream
    size: int


def _missed_per_exponent(task: _ExponentTask) -> np.ndarray:
    # g = 0 leaves the observation equal to the Phase-II noise, shared by every x
    zero = lambda h_ae, h_eb: np.zeros_like(h_ae)  # noqa: E731
    base = draw_trials(task.params, task.stream, task.size, Hypothesis.H1, forge=zero)
    sigma2 = task.rule.sigma2_per_channel
    missed = np.empty(len(task.grid), dtype=np.int64)
    for i, x in enumerate(task.grid):
        obs = exponent_attack(base.h_ae_hat, task.params.rho_ae, x) + base.observation
        psi = llr_statistic(obs, base.h_ab_hat, sigma2)
        gamma = modulus_statistic(obs, base.h_ab_hat)
        missed[i] = np.count_nonzero(accept_mask(psi, gamma, task.rule))
    return missed


def exponent_sweep(
    params: SystemParams,
    rule: LlrRule | CombinedRule,
    grid: np.ndarray,
    mc_budget: int,
    stream: RandomStream,
    *,
    workers: int = 1,
    block_size: int = 8192,
) -> np.ndarray:
    """Missed-detection counts for every exponent on one common pool of H1 trials."""
    tasks = [
        _ExponentTask(params, rule, tuple(grid.tolist()), stream.substream(b), count)
        for b, count in enumerate(block_counts(mc_budget, block_size))
    ]
    counts = parallel_map(_missed_per_exponent, tasks, workers)
    return np.sum(counts, axis=0) if counts else np.zeros(len(grid), dtype=np.int64)


def optimize_attack_exponent(
    params: SystemParams,
    rule: LlrRule | CombinedRule,
    grid_step: float = 0.1,
    mc_budget: int = 100_000,
    stream: RandomStream | None = None,
    *,
    workers: int = 1,
    block_size: int = 8192,
) -> float:
    """The exponent maximizing Eve's missed-detection rate under ``rule``; ties go toward x = 1."""
    if mc_budget < 1:
        raise ValueError(f"mc_budget must be positive, got {mc_budget}")
    if params.rho_ae == 0:
        raise AttackError("exponent search needs rho_ae != 0")
    stream = stream or RandomStream(0)
    started = time.perf_counter()

    grid = exponent_grid(grid_step)
    missed = exponent_sweep(
        params, rule, grid, mc_budget, stream.substream(StreamTag.EXPONENT),
        workers=workers, block_size=block_size,
    )
    best = len(grid) - 1 - int(np.argmax(missed[::-1]))
    x = float(grid[best])

    logger.bind(
        x=x,
        pmd=missed[best] / mc_budget,
        epsilon=rule.epsilon if isinstance(rule, CombinedRule) else math.inf,
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("exponent_optimized")
    return x
