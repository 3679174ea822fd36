"""Random streams, complex Gaussian sampling and the noncentral chi-square family.

Random streams are counter-based: a (seed, path, counter) triple fixes every
draw, so work split across processes replays bit for bit.
"""

import math
from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import optimize, special, stats

_TAIL_BOUND = 1e-14
_QUANTILE_TOL = 1e-12


class StreamTag(IntEnum):
    """First path component of every substream, one per purpose."""

    H0_POOL = 0
    H1_POOL = 1
    CALIBRATION = 2
    THRESHOLDS = 3
    EXPONENT = 4
    TRAINING = 5
    REALIZATION = 6


@dataclass(frozen=True)
class RandomStream:
    seed: int
    path: tuple[int, ...] = ()
    counter: int = 0

    def substream(self, *ids: int) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(int(i) for i in ids), self.counter)

    def key(self) -> int:
        words = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(2, np.uint64)
        return int(words[0]) | (int(words[1]) << 64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(), counter=self.counter))


def as_generator(stream: "RandomStream | np.random.Generator") -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    return stream.generator()


def sample_complex_gaussian(
    n: int | tuple[int, ...],
    variance,
    stream: "RandomStream | np.random.Generator",
) -> np.ndarray:
    """Draw circularly symmetric complex Gaussian entries with the given total variance.

    ``variance`` may be a scalar or an array broadcasting against the last axis.
    Real and imaginary parts each carry half of it.
    """
    shape = (n,) if isinstance(n, (int, np.integer)) else tuple(n)
    if any(d < 0 for d in shape) or (len(shape) == 1 and shape[0] < 1):
        raise ValueError(f"sample size must be positive, got {n}")
    variance = np.asarray(variance, dtype=float)
    if not np.all(np.isfinite(variance)) or np.any(variance < 0):
        raise ValueError(f"variance must be finite and nonnegative, got {variance}")

    rng = as_generator(stream)
    parts = rng.standard_normal(shape + (2,))
    scale = np.sqrt(variance / 2.0)
    return scale * parts[..., 0] + 1j * (scale * parts[..., 1])


@dataclass(frozen=True)
class NoncentralChi2:
    dof: int
    lam: float = 0.0

    def __post_init__(self):
        if int(self.dof) != self.dof or self.dof < 1:
            raise ValueError(f"dof must be a positive integer, got {self.dof}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"noncentrality must be finite and nonnegative, got {self.lam}")


def _poisson_terms(half_lam: float) -> np.ndarray:
    """Indices of the Poisson(λ/2) mixture, truncated once the remaining mass is below the tail bound."""
    if half_lam == 0.0:
        return np.zeros(1)
    upper = int(half_lam + 12.0 * math.sqrt(half_lam) + 40)
    while stats.poisson.sf(upper, half_lam) >= _TAIL_BOUND:
        upper *= 2
    return np.arange(upper + 1, dtype=float)


def nc_chi2_cdf(x, dist: NoncentralChi2):
    """CDF of the noncentral chi-square as a Poisson mixture of central CDFs.

    Accepts a scalar or an array of evaluation points.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    half_x = np.clip(x, 0.0, None) / 2.0
    half_lam = dist.lam / 2.0

    j = _poisson_terms(half_lam)
    weights = stats.poisson.pmf(j, half_lam) if half_lam > 0 else np.ones(1)
    central = special.gammainc(dist.dof / 2.0 + j, half_x[..., None])
    cdf = np.clip(central @ weights, 0.0, 1.0)
    cdf = np.where(x <= 0.0, 0.0, cdf)
    return float(cdf) if cdf.ndim == 0 else cdf


def nc_chi2_quantile(p: float, dist: NoncentralChi2) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")

    hi = dist.dof + dist.lam + 20.0 * math.sqrt(2.0 * dist.dof + 4.0 * dist.lam) + 50.0
    while nc_chi2_cdf(hi, dist) < p:
        hi *= 2.0

    return optimize.brentq(
        lambda x: nc_chi2_cdf(x, dist) - p,
        0.0,
        hi,
        xtol=_QUANTILE_TOL,
        rtol=1e-14,
        maxiter=500,
    )


def wilson_interval(events: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials == 0:
        return (0.0, 1.0)

    z = stats.norm.ppf(0.5 + confidence / 2.0)
    p_hat = events / trials

    denominator = 1 + z**2 / trials
    center = (p_hat + z**2 / (2 * trials)) / denominator
    margin = (z / denominator) * math.sqrt(
        p_hat * (1 - p_hat) / trials + z**2 / (4 * trials**2)
    )

    lower = max(0.0, center - margin)
    upper = min(1.0, center + margin)
    # keep the estimate inside its own interval despite rounding
    return (min(lower, p_hat), max(upper, p_hat))


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def linear_to_db(value: float) -> float:
    return 10.0 * math.log10(value)


def snr_db_to_variance(snr_db: float) -> float:
    """Noise variance for a unit-power channel at the given SNR."""
    return 1.0 / db_to_linear(snr_db)


def parallel_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """Apply ``fn`` to each item, results returned in item order.

    Runs inline for a single worker, otherwise on a process pool; ``fn`` and the
    items must then be picklable.
    """
    items = list(items)
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def block_counts(size: int, block_size: int) -> list[int]:
    """Split ``size`` trials into fixed blocks; block ``b`` always draws from substream ``b``."""
    if size < 0:
        raise ValueError(f"size must be nonnegative, got {size}")
    if block_size < 1:
        raise ValueError(f"block_size must be positive, got {block_size}")
    full, rest = divmod(size, block_size)
    return [block_size] * full + ([rest] if rest else [])
