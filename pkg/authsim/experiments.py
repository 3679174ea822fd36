"""Monte Carlo engine: named scenarios, error-rate estimation and sweeps."""

import itertools
import time
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from loguru import logger

from authsim.attacks import AttackStrategy, optimize_attack_exponent
from authsim.channel_model import Hypothesis, SystemParams, draw_channel, draw_trials, setup_estimate
from authsim.config import load_scenarios
from authsim.detectors import (
    CalibrationError,
    CombinedRule,
    LlrCalibration,
    accept_mask,
    calibrate_llr_rule,
    optimize_thresholds,
    sigma2_per_channel,
    statistic_blocks,
)
from authsim.logging_config import bind_context
from authsim.ocnn import NEIGHBOR_GRID, OcnnModel, OcnnVariant, featurize, training_set, tune
from authsim.stats_core import (
    RandomStream,
    StreamTag,
    block_counts,
    parallel_map,
    snr_db_to_variance,
    wilson_interval,
)

MIN_TRIALS = 1000
SWEEP_AXES = ("n_channels", "alpha", "rho_ae", "target_pfa", "snr", "snr_ii")


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    variant: OcnnVariant | None = None
    calibration: str = "auto"
    sigma_mode: str = "true_alpha"
    mu_source: str = "genie"

    def __post_init__(self):
        if self.kind not in ("llr", "combined", "ocnn"):
            raise ValueError(f"unknown detector {self.kind!r}")
        if self.kind == "ocnn":
            if self.variant is None:
                raise ValueError("an ocnn detector needs a variant")
            object.__setattr__(self, "variant", OcnnVariant(self.variant))
        elif self.variant is not None:
            raise ValueError(f"detector {self.kind} takes no variant")

    @classmethod
    def parse(cls, text: str, **options) -> "DetectorSpec":
        """``llr``, ``combined`` or ``ocnn:<variant>``."""
        kind, _, variant = text.strip().partition(":")
        return cls(kind, variant or None, **options)

    @property
    def label(self) -> str:
        return f"ocnn:{self.variant}" if self.kind == "ocnn" else self.kind


@dataclass(frozen=True)
class Knobs:
    block_size: int = 8192
    calibration_trials: int = 1_000_000
    fa_band: tuple[float, float] = (0.5, 2.0)
    threshold_trials: int = 1_000_000
    epsilon_points: int = 40
    epsilon_span: tuple[float, float] = (1e-3, 1e2)
    theta_rel_tol: float = 1e-3
    exponent_step: float = 0.1
    exponent_trials: int = 100_000
    eve_assumes_flat: bool = True
    alternations: int = 1
    ocnn_target_pfa: float = 1e-3
    g_folds: int = 10
    training_size: int = 1000
    neighbor_grid: tuple[int, ...] = NEIGHBOR_GRID
    ocnn_realizations: int = 10

    @classmethod
    def from_settings(cls, settings: dict) -> "Knobs":
        sim = settings.get("simulation", {})
        cal = settings.get("calibration", {})
        thr = settings.get("thresholds", {})
        att = settings.get("attack", {})
        occ = settings.get("ocnn", {})
        defaults = cls()
        return cls(
            block_size=int(sim.get("block_size", defaults.block_size)),
            calibration_trials=int(cal.get("trials", defaults.calibration_trials)),
            fa_band=tuple(float(v) for v in cal.get("fa_band", defaults.fa_band)),
            threshold_trials=int(thr.get("trials", defaults.threshold_trials)),
            epsilon_points=int(thr.get("epsilon_points", defaults.epsilon_points)),
            epsilon_span=tuple(float(v) for v in thr.get("epsilon_span", defaults.epsilon_span)),
            theta_rel_tol=float(thr.get("theta_rel_tol", defaults.theta_rel_tol)),
            exponent_step=float(att.get("exponent_step", defaults.exponent_step)),
            exponent_trials=int(att.get("exponent_trials", defaults.exponent_trials)),
            eve_assumes_flat=bool(att.get("eve_assumes_flat", defaults.eve_assumes_flat)),
            alternations=int(att.get("alternations", defaults.alternations)),
            ocnn_target_pfa=float(occ.get("target_pfa", defaults.ocnn_target_pfa)),
            g_folds=int(occ.get("g_folds", defaults.g_folds)),
            training_size=int(occ.get("training_size", defaults.training_size)),
            neighbor_grid=tuple(int(v) for v in occ.get("neighbor_grid", defaults.neighbor_grid)),
            ocnn_realizations=int(occ.get("realizations", defaults.ocnn_realizations)),
        )


def detector_options(settings: dict) -> dict:
    """Calibration options of the statistical detectors taken from the settings document."""
    cal = settings.get("calibration", {})
    options = {}
    for option, key in (("calibration", "mode"), ("sigma_mode", "sigma_mode"), ("mu_source", "mu_source")):
        if key in cal:
            options[option] = cal[key]
    return options


@dataclass(frozen=True)
class Scenario:
    name: str
    params: SystemParams
    detector: DetectorSpec
    attack: AttackStrategy | None = None
    target_pfa: float = 1e-4
    trials_h0: int = 10_000_000
    trials_h1: int = 1_000_000
    seed: int = 20190601
    realizations: int | None = None
    axis_value: float | None = None
    knobs: Knobs = field(default_factory=Knobs)

    def __post_init__(self):
        if not 0.0 < self.target_pfa < 1.0:
            raise ValueError(f"target_pfa must lie in (0, 1), got {self.target_pfa}")
        if self.trials_h0 < MIN_TRIALS or self.trials_h1 < MIN_TRIALS:
            raise ValueError(f"trial counts must be at least {MIN_TRIALS}")
        if self.realizations is not None and self.realizations < 1:
            raise ValueError(f"realizations must be positive, got {self.realizations}")


@dataclass(frozen=True)
class ErrorRates:
    scenario: str
    axis_value: float | None
    detector: str
    attack: str
    pfa: float
    pfa_ci: tuple[float, float]
    pmd: float
    pmd_ci: tuple[float, float]
    trials_h0: int
    trials_h1: int
    fa_events: int
    md_events: int
    zero_event: bool
    details: dict = field(default_factory=dict, compare=False)


def error_rates(scenario: Scenario, attack_label: str, fa: int, md: int, details: dict) -> ErrorRates:
    """Rates with Wilson intervals; a missed-detection count of zero is reported as the bound 1/trials."""
    pmd = md / scenario.trials_h1
    zero_event = md == 0
    if zero_event:
        pmd = 1.0 / scenario.trials_h1
    return ErrorRates(
        scenario=scenario.name,
        axis_value=scenario.axis_value,
        detector=scenario.detector.label,
        attack=attack_label,
        pfa=fa / scenario.trials_h0,
        pfa_ci=wilson_interval(fa, scenario.trials_h0),
        pmd=pmd,
        pmd_ci=wilson_interval(md, scenario.trials_h1),
        trials_h0=scenario.trials_h0,
        trials_h1=scenario.trials_h1,
        fa_events=fa,
        md_events=md,
        zero_event=zero_event,
        details=details,
    )


def channel_realization(
    params: SystemParams, stream: RandomStream, index: int
) -> tuple[RandomStream, np.ndarray, np.ndarray]:
    """Substream, channel and Phase-I reference of fixed realization ``index``."""
    seg = stream.substream(StreamTag.REALIZATION, index)
    rng = seg.substream(StreamTag.REALIZATION).generator()
    h_ab = draw_channel(params, rng)
    return seg, h_ab, setup_estimate(h_ab, params, rng)


def _segments(scenario: Scenario, stream: RandomStream, realizations: int | None):
    """(stream, h_ab, reference, H0 share, H1 share) per channel realization.

    Without fixed realizations a single segment redraws the channel in every trial.
    """
    if realizations is None:
        yield stream, None, None, scenario.trials_h0, scenario.trials_h1
        return
    h0_shares = [len(part) for part in np.array_split(np.arange(scenario.trials_h0), realizations)]
    h1_shares = [len(part) for part in np.array_split(np.arange(scenario.trials_h1), realizations)]
    for r in range(realizations):
        seg, h_ab, reference = channel_realization(scenario.params, stream, r)
        yield seg, h_ab, reference, h0_shares[r], h1_shares[r]


def _run_llr(scenario: Scenario, stream: RandomStream, workers: int) -> ErrorRates:
    spec, knobs, params = scenario.detector, scenario.knobs, scenario.params
    attack = scenario.attack or AttackStrategy.llr()
    fa = md = 0
    modes = set()
    for seg, h_ab, reference, n_h0, n_h1 in _segments(scenario, stream, scenario.realizations):
        calibration: LlrCalibration = calibrate_llr_rule(
            params,
            scenario.target_pfa,
            seg,
            mode=spec.calibration,
            sigma_mode=spec.sigma_mode,
            mu_source=spec.mu_source,
            trials=knobs.calibration_trials,
            fa_band=knobs.fa_band,
            workers=workers,
            block_size=knobs.block_size,
            h_ab=h_ab,
            reference=reference,
        )
        modes.add(calibration.mode)
        mu_source = spec.mu_source if calibration.table is not None else None
        common = dict(
            sigma2=calibration.rule.sigma2_per_channel,
            workers=workers,
            block_size=knobs.block_size,
            mu_source=mu_source,
            h_ab=h_ab,
            reference=reference,
        )
        h0 = statistic_blocks(params, n_h0, seg.substream(StreamTag.H0_POOL), Hypothesis.H0, **common)
        h1 = statistic_blocks(
            params, n_h1, seg.substream(StreamTag.H1_POOL), Hypothesis.H1, attack=attack, **common
        )
        fa += int(np.count_nonzero(~accept_mask(h0.psi, h0.gamma, calibration.rule, calibration.thresholds(h0))))
        md += int(np.count_nonzero(accept_mask(h1.psi, h1.gamma, calibration.rule, calibration.thresholds(h1))))
        theta = calibration.rule.theta
    details = {"theta": theta, "calibration": "+".join(sorted(modes))}
    return error_rates(scenario, attack.label, fa, md, details)


def matched_combined_rule(
    scenario: Scenario, stream: RandomStream, workers: int
) -> tuple[CombinedRule, AttackStrategy]:
    """Alternate Bob's threshold search and Eve's exponent search.

    Eve optimizes against the rule she expects, built for alpha = 1 when she
    assumes flat fading; Bob then answers her exponent.
    """
    knobs, params = scenario.knobs, scenario.params
    sigma2 = sigma2_per_channel(params, scenario.detector.sigma_mode)
    search = dict(
        workers=workers,
        block_size=knobs.block_size,
        epsilon_points=knobs.epsilon_points,
        epsilon_span=knobs.epsilon_span,
        theta_rel_tol=knobs.theta_rel_tol,
    )

    def bob(attack: AttackStrategy, at: SystemParams, sig, round_: int) -> CombinedRule:
        return optimize_thresholds(
            at, scenario.target_pfa, attack, knobs.threshold_trials,
            stream.substream(StreamTag.THRESHOLDS, round_), sigma2=sig, **search,
        )

    if scenario.attack is not None:
        return bob(scenario.attack, params, sigma2, 0), scenario.attack

    eve_params = params.with_alpha(1.0) if knobs.eve_assumes_flat else params
    eve_sigma2 = sigma2_per_channel(eve_params, scenario.detector.sigma_mode)
    attack = AttackStrategy.exponent(1.0)
    rule = None
    for round_ in range(max(knobs.alternations, 1)):
        expected = bob(attack, eve_params, eve_sigma2, 2 * round_)
        x = optimize_attack_exponent(
            params, expected, knobs.exponent_step, knobs.exponent_trials,
            stream.substream(StreamTag.EXPONENT, round_),
            workers=workers, block_size=knobs.block_size,
        )
        attack = AttackStrategy.exponent(x)
        rule = bob(attack, params, sigma2, 2 * round_ + 1)
    return rule, attack


def _run_combined(scenario: Scenario, stream: RandomStream, workers: int) -> ErrorRates:
    knobs, params = scenario.knobs, scenario.params
    rule, attack = matched_combined_rule(scenario, stream, workers)
    fa = md = 0
    for seg, h_ab, reference, n_h0, n_h1 in _segments(scenario, stream, scenario.realizations):
        common = dict(
            sigma2=rule.sigma2_per_channel,
            workers=workers,
            block_size=knobs.block_size,
            h_ab=h_ab,
            reference=reference,
        )
        h0 = statistic_blocks(params, n_h0, seg.substream(StreamTag.H0_POOL), Hypothesis.H0, **common)
        h1 = statistic_blocks(
            params, n_h1, seg.substream(StreamTag.H1_POOL), Hypothesis.H1, attack=attack, **common
        )
        fa += int(np.count_nonzero(~accept_mask(h0.psi, h0.gamma, rule)))
        md += int(np.count_nonzero(accept_mask(h1.psi, h1.gamma, rule)))
    details = {"theta": rule.theta, "epsilon": rule.epsilon, "x": attack.x}
    return error_rates(scenario, attack.label, fa, md, details)


@dataclass(frozen=True)
class _OcnnBlock:
    params: SystemParams
    model: OcnnModel
    stream: RandomStream
    size: int
    truth: Hypothesis
    attack: AttackStrategy | None
    h_ab: np.ndarray


def _ocnn_accepts(task: _OcnnBlock) -> int:
    forge = None
    if task.attack is not None:
        attack, params = task.attack, task.params
        forge = lambda h_ae, h_eb: attack.forge(h_ae, h_eb, params)  # noqa: E731
    sample = draw_trials(task.params, task.stream, task.size, task.truth, forge=forge, h_ab=task.h_ab)
    return int(np.count_nonzero(task.model.accepts(featurize(sample.observation))))


def ocnn_blocks(
    model: OcnnModel,
    params: SystemParams,
    h_ab: np.ndarray,
    size: int,
    stream: RandomStream,
    truth: Hypothesis,
    attack: AttackStrategy | None = None,
    workers: int = 1,
    block_size: int = 8192,
) -> int:
    """Accepted count among ``size`` trials on one channel realization."""
    model.train_mean  # computed once here rather than in every worker
    tasks = [
        _OcnnBlock(params, model, stream.substream(b), count, truth, attack, h_ab)
        for b, count in enumerate(block_counts(size, block_size))
    ]
    return sum(parallel_map(_ocnn_accepts, tasks, workers))


def train_ocnn(scenario: Scenario, stream: RandomStream, h_ab: np.ndarray, workers: int = 1) -> OcnnModel:
    knobs = scenario.knobs
    training = training_set(
        h_ab, scenario.params, knobs.training_size, stream.substream(StreamTag.TRAINING).generator()
    )
    return tune(
        training,
        scenario.detector.variant,
        knobs.ocnn_target_pfa,
        knobs.g_folds,
        knobs.neighbor_grid,
        workers,
    )


def _run_ocnn(scenario: Scenario, stream: RandomStream, workers: int) -> ErrorRates:
    knobs, params = scenario.knobs, scenario.params
    attack = scenario.attack or AttackStrategy.llr()
    realizations = scenario.realizations or knobs.ocnn_realizations
    fa = md = 0
    picked = []
    for seg, h_ab, _, n_h0, n_h1 in _segments(scenario, stream, realizations):
        model = train_ocnn(scenario, seg, h_ab, workers)
        picked.append((model.j, model.k, model.theta_d))
        accepted = ocnn_blocks(
            model, params, h_ab, n_h0, seg.substream(StreamTag.H0_POOL), Hypothesis.H0,
            workers=workers, block_size=knobs.block_size,
        )
        fa += n_h0 - accepted
        md += ocnn_blocks(
            model, params, h_ab, n_h1, seg.substream(StreamTag.H1_POOL), Hypothesis.H1,
            attack=attack, workers=workers, block_size=knobs.block_size,
        )
    # one entry per channel realization, in realization order
    js, ks, thetas = (list(column) for column in zip(*picked))
    details = {"j": js, "k": ks, "theta_d": thetas, "realizations": realizations}
    return error_rates(scenario, attack.label, fa, md, details)


_RUNNERS = {"llr": _run_llr, "combined": _run_combined, "ocnn": _run_ocnn}


def run_scenario(scenario: Scenario, workers: int = 1) -> ErrorRates:
    """Estimate both error rates of one scenario.

    Every number depends only on (seed, scenario); ``workers`` changes speed only.
    """
    bind_context(scenario=scenario.name, detector=scenario.detector.label, step="run")
    started = time.perf_counter()
    stream = RandomStream(scenario.seed)
    try:
        rates = _RUNNERS[scenario.detector.kind](scenario, stream, workers)
    except CalibrationError as exc:
        raise CalibrationError(f"{scenario.name}: {exc}") from exc

    logger.bind(
        axis_value=scenario.axis_value,
        trials=scenario.trials_h0 + scenario.trials_h1,
        pfa=rates.pfa,
        pmd=rates.pmd,
        zero_event=rates.zero_event,
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("scenario_complete")
    return rates


def apply_axis(scenario: Scenario, axis: str, value) -> Scenario:
    params = scenario.params
    if axis == "n_channels":
        params = params.with_channels(int(value))
    elif axis == "alpha":
        params = params.with_alpha(float(value))
    elif axis == "rho_ae":
        params = params.replace(rho_ae=float(value))
    elif axis == "snr":
        params = params.replace(sigma2_i=snr_db_to_variance(float(value)))
    elif axis == "snr_ii":
        params = params.replace(sigma2_ii=snr_db_to_variance(float(value)))
    elif axis == "target_pfa":
        return replace(scenario, target_pfa=float(value), axis_value=float(value))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    return replace(scenario, params=params, axis_value=float(value))


def sweep(base: Scenario, axis: str, values: Iterable, workers: int = 1) -> list[ErrorRates]:
    """Run ``base`` at every value of one axis; all points share the base seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    return [run_scenario(apply_axis(base, axis, v), workers) for v in values]


@dataclass(frozen=True)
class Budget:
    seed: int = 20190601
    trials_h0: int = 10_000_000
    trials_h1: int = 1_000_000
    knobs: Knobs = field(default_factory=Knobs)
    detector_options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioFamily:
    """A registry entry: base parameters, detectors and an ordered grid of axes."""

    name: str
    description: str
    params: dict
    detectors: tuple[str, ...]
    target_pfa: float = 1e-4
    grid: dict = field(default_factory=dict)
    eve_assumes_flat: bool | None = None
    realizations: int | None = None

    @classmethod
    def from_document(cls, name: str, entry: dict) -> "ScenarioFamily":
        return cls(
            name=name,
            description=entry.get("description", "").strip(),
            params=dict(entry["params"]),
            detectors=tuple(entry.get("detectors", ["llr"])),
            target_pfa=float(entry.get("target_pfa", 1e-4)),
            grid={axis: list(values) for axis, values in (entry.get("grid") or {}).items()},
            eve_assumes_flat=entry.get("eve_assumes_flat"),
            realizations=entry.get("realizations"),
        )

    def system_params(self, **axes) -> SystemParams:
        merged = dict(self.params)
        for axis, value in axes.items():
            if axis in ("snr", "snr_ii"):
                key = "snr_i_db" if axis == "snr" else "snr_ii_db"
                merged.pop("sigma2_i" if axis == "snr" else "sigma2_ii", None)
                merged[key] = value
            elif axis != "target_pfa":
                merged[axis] = value
        for key in ("snr_i_db", "snr_ii_db"):
            if key in merged:
                merged[key] = float(merged[key])
        return SystemParams.uniform(**merged)

    def point(self, budget: Budget = Budget(), detector: str | None = None, **axes) -> Scenario:
        knobs = budget.knobs
        if self.eve_assumes_flat is not None:
            knobs = replace(knobs, eve_assumes_flat=bool(self.eve_assumes_flat))
        spec = DetectorSpec.parse(detector or self.detectors[0], **budget.detector_options)
        label = ",".join(f"{axis}={value:g}" for axis, value in list(axes.items())[:-1])
        last = list(axes.values())[-1] if axes else None
        return Scenario(
            name=f"{self.name}[{label}]" if label else self.name,
            params=self.system_params(**axes),
            detector=spec,
            target_pfa=float(axes.get("target_pfa", self.target_pfa)),
            trials_h0=budget.trials_h0,
            trials_h1=budget.trials_h1,
            seed=budget.seed,
            realizations=self.realizations if spec.kind == "ocnn" else None,
            axis_value=None if last is None else float(last),
            knobs=knobs,
        )

    def scenarios(self, budget: Budget = Budget()) -> list[Scenario]:
        """Grid points in document order (last axis fastest), each with every detector."""
        axes = list(self.grid)
        points = itertools.product(*(self.grid[a] for a in axes)) if axes else [()]
        return [
            self.point(budget, detector, **dict(zip(axes, values)))
            for values in points
            for detector in self.detectors
        ]


def load_registry(path: Path | None = None) -> dict[str, ScenarioFamily]:
    return {name: ScenarioFamily.from_document(name, entry) for name, entry in load_scenarios(path).items()}


def run_family(family: ScenarioFamily, budget: Budget = Budget(), workers: int = 1) -> list[ErrorRates]:
    bind_context(step="family")
    started = time.perf_counter()
    results = [run_scenario(s, workers) for s in family.scenarios(budget)]
    logger.bind(
        family=family.name,
        points=len(results),
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("family_complete")
    return results
