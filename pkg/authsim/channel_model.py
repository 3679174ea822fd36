"""Random quantities of the authentication system model.

Vectors are numpy complex arrays whose last axis indexes the N sub-carriers;
every generator also accepts a batch of shape (M, N) and draws noise of the same
shape.
"""

import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np

from authsim.stats_core import RandomStream, as_generator, linear_to_db, sample_complex_gaussian, snr_db_to_variance

Stream = RandomStream | np.random.Generator


class Hypothesis(StrEnum):
    H0 = "H0"
    H1 = "H1"


def _unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _variance(name: str, value: float) -> None:
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class SystemParams:
    n_channels: int
    alpha: tuple[float, ...]
    sigma2_i: float
    sigma2_ii: float
    rho_ae: float
    rho_eb: float = 0.0
    rho_ab: float = 0.0
    sigma2_ae: float = 0.0
    sigma2_eb: float = 0.0
    power_delay: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if int(self.n_channels) != self.n_channels or self.n_channels < 1:
            raise ValueError(f"n_channels must be a positive integer, got {self.n_channels}")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        power_delay = self.power_delay or (1.0,) * self.n_channels
        object.__setattr__(self, "power_delay", tuple(float(p) for p in power_delay))

        if len(self.alpha) != self.n_channels:
            raise ValueError(f"alpha has {len(self.alpha)} entries, expected {self.n_channels}")
        if len(self.power_delay) != self.n_channels:
            raise ValueError(
                f"power_delay has {len(self.power_delay)} entries, expected {self.n_channels}"
            )
        for n, a in enumerate(self.alpha):
            _unit(f"alpha[{n}]", a)
        for n, p in enumerate(self.power_delay):
            _variance(f"power_delay[{n}]", p)
        for name in ("rho_ae", "rho_eb", "rho_ab"):
            _unit(name, getattr(self, name))
        for name in ("sigma2_i", "sigma2_ii", "sigma2_ae", "sigma2_eb"):
            _variance(name, getattr(self, name))

    @classmethod
    def uniform(
        cls,
        n_channels: int,
        alpha: float = 1.0,
        *,
        rho_ae: float,
        sigma2_i: float | None = None,
        sigma2_ii: float | None = None,
        snr_i_db: float | None = None,
        snr_ii_db: float | None = None,
        power_delay: float = 1.0,
        **rest,
    ) -> "SystemParams":
        """Same time correlation and power delay on every sub-carrier; SNRs in dB or variances."""
        if sigma2_i is None:
            if snr_i_db is None:
                raise ValueError("either sigma2_i or snr_i_db is required")
            sigma2_i = snr_db_to_variance(snr_i_db)
        if sigma2_ii is None:
            if snr_ii_db is None:
                raise ValueError("either sigma2_ii or snr_ii_db is required")
            sigma2_ii = snr_db_to_variance(snr_ii_db)
        return cls(
            n_channels=n_channels,
            alpha=(alpha,) * n_channels,
            sigma2_i=sigma2_i,
            sigma2_ii=sigma2_ii,
            rho_ae=rho_ae,
            power_delay=(power_delay,) * n_channels,
            **rest,
        )

    def replace(self, **changes) -> "SystemParams":
        return replace(self, **changes)

    def with_channels(self, n_channels: int) -> "SystemParams":
        """Resize to ``n_channels`` carrying the first sub-carrier's alpha and power delay."""
        return replace(
            self,
            n_channels=n_channels,
            alpha=(self.alpha[0],) * n_channels,
            power_delay=(self.power_delay[0],) * n_channels,
        )

    def with_alpha(self, alpha: float) -> "SystemParams":
        return replace(self, alpha=(alpha,) * self.n_channels)

    @property
    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alpha)

    @property
    def power_delay_array(self) -> np.ndarray:
        return np.asarray(self.power_delay)

    @property
    def snr_i_db(self) -> float:
        return math.inf if self.sigma2_i == 0 else linear_to_db(1.0 / self.sigma2_i)

    @property
    def snr_ii_db(self) -> float:
        return math.inf if self.sigma2_ii == 0 else linear_to_db(1.0 / self.sigma2_ii)


@dataclass(frozen=True)
class TrialSample:
    h_ab: np.ndarray
    h_ab_hat: np.ndarray
    h_ae_hat: np.ndarray
    h_eb_hat: np.ndarray
    observation: np.ndarray
    truth: Hypothesis


def _check_length(vector: np.ndarray, params: SystemParams) -> None:
    if vector.shape[-1] != params.n_channels:
        raise ValueError(
            f"vector has {vector.shape[-1]} entries, expected {params.n_channels}"
        )


def draw_channel(params: SystemParams, stream: Stream, size: int | None = None) -> np.ndarray:
    """Alice-Bob channel with independent entries of variance power_delay[n]."""
    shape = (params.n_channels,) if size is None else (size, params.n_channels)
    return sample_complex_gaussian(shape, params.power_delay_array, stream)


def setup_estimate(h_ab: np.ndarray, params: SystemParams, stream: Stream) -> np.ndarray:
    """Bob's Phase-I reference: the channel plus estimation noise of variance sigma2_i."""
    _check_length(h_ab, params)
    return h_ab + sample_complex_gaussian(h_ab.shape, params.sigma2_i, stream)


def legit_observation(h_ab: np.ndarray, params: SystemParams, stream: Stream) -> np.ndarray:
    """Phase-II estimate of a message from Alice after time-varying fading."""
    _check_length(h_ab, params)
    alpha = params.alpha_array
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError(f"alpha must lie in [0, 1], got {params.alpha}")
    rng = as_generator(stream)
    fading = sample_complex_gaussian(h_ab.shape, 1.0, rng)
    noise = sample_complex_gaussian(h_ab.shape, params.sigma2_ii, rng)
    return alpha * h_ab + np.sqrt(1.0 - alpha**2) * fading + noise


def forged_observation(g: np.ndarray, params: SystemParams, stream: Stream) -> np.ndarray:
    """Phase-II estimate of a message forged by Eve as ``g``."""
    _check_length(g, params)
    return g + sample_complex_gaussian(g.shape, params.sigma2_ii, stream)


def eve_observations(
    h_ab: np.ndarray, params: SystemParams, stream: Stream
) -> tuple[np.ndarray, np.ndarray]:
    """Eve's estimates of the Alice-Eve and Eve-Bob channels.

    Both share the same random component ``r`` drawn with the channel's power profile.
    """
    _check_length(h_ab, params)
    rng = as_generator(stream)
    r = sample_complex_gaussian(h_ab.shape, params.power_delay_array, rng)
    w_ae = sample_complex_gaussian(h_ab.shape, params.sigma2_ae, rng)
    w_eb = sample_complex_gaussian(h_ab.shape, params.sigma2_eb, rng)
    h_ae_hat = params.rho_ae * h_ab + math.sqrt(1.0 - params.rho_ae**2) * r + w_ae
    h_eb_hat = params.rho_eb * h_ab + math.sqrt(1.0 - params.rho_eb**2) * r + w_eb
    return h_ae_hat, h_eb_hat


Forge = Callable[[np.ndarray, np.ndarray], np.ndarray]


def draw_trials(
    params: SystemParams,
    stream: Stream,
    size: int,
    truth: Hypothesis,
    forge: Forge | None = None,
    h_ab: np.ndarray | None = None,
    reference: np.ndarray | None = None,
) -> TrialSample:
    """Draw ``size`` trials under one hypothesis.

    Draw order is fixed: channel, reference, Eve's pair, observation. A fixed
    channel realization (and its reference) may be passed in and is broadcast to
    the batch. H1 batches never draw the fading innovation, so they do not
    depend on alpha.
    """
    if truth is Hypothesis.H1 and forge is None:
        raise ValueError("an H1 batch needs a forge rule")
    rng = as_generator(stream)
    shape = (size, params.n_channels)

    h = draw_channel(params, rng, size) if h_ab is None else np.broadcast_to(h_ab, shape)
    ref = setup_estimate(h, params, rng) if reference is None else np.broadcast_to(reference, shape)
    h_ae_hat, h_eb_hat = eve_observations(h, params, rng)

    if truth is Hypothesis.H0:
        observation = legit_observation(h, params, rng)
    else:
        observation = forged_observation(forge(h_ae_hat, h_eb_hat), params, rng)

    return TrialSample(
        h_ab=h,
        h_ab_hat=ref,
        h_ae_hat=h_ae_hat,
        h_eb_hat=h_eb_hat,
        observation=observation,
        truth=truth,
    )
