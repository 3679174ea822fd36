"""Batch front-end: configuration parsing, scenario runs and reports."""

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from jinja2 import Environment, FileSystemLoader
from loguru import logger

from authsim.detectors import CalibrationError
from authsim.experiments import (
    SWEEP_AXES,
    Budget,
    DetectorSpec,
    ErrorRates,
    Knobs,
    ScenarioFamily,
    channel_realization,
    detector_options,
    load_registry,
    run_family,
    run_scenario,
    sweep,
    train_ocnn,
)
from authsim.ocnn import save_model
from authsim.stats_core import RandomStream

TEMPLATE_DIR = Path(__file__).resolve().parent
TEMPLATE_NAME = "report_template.md.j2"
FORMATS = ("csv", "json", "markdown")
REPORT_COLUMNS = (
    "scenario", "axis_value", "detector", "attack",
    "pfa", "pfa_lo", "pfa_hi", "pmd", "pmd_lo", "pmd_hi",
    "trials_h0", "trials_h1", "zero_event",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def _unit(value: str) -> float:
    number = float(value)
    if not 0.0 <= number <= 1.0:
        raise ValueError(f"{number} is outside [0, 1]")
    return number


def _open_unit(value: str) -> float:
    number = float(value)
    if not 0.0 < number < 1.0:
        raise ValueError(f"{number} is outside (0, 1)")
    return number


def _variance(value: str) -> float:
    number = float(value)
    if not math.isfinite(number) or number < 0:
        raise ValueError(f"{number} is not a finite nonnegative variance")
    return number


def _decibel(value: str) -> float:
    number = float(value)
    if math.isnan(number):
        raise ValueError("SNR must be a number")
    return number


def _positive_int(minimum: int = 1):
    def parse(value: str) -> int:
        number = int(value)
        if number < minimum:
            raise ValueError(f"{number} is below the minimum {minimum}")
        return number

    return parse


def _seed(value: str) -> int:
    number = int(value)
    if not 0 <= number < 2**64:
        raise ValueError(f"{number} is not a 64-bit unsigned seed")
    return number


def _choice(options: tuple[str, ...]):
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"{value!r} is not one of {', '.join(options)}")
        return value

    return parse


def _detectors(value: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in value.split(",") if part.strip())
    if not names:
        raise ValueError("no detector given")
    for name in names:
        DetectorSpec.parse(name)
    return names


def _values(value: str) -> tuple[float, ...]:
    return tuple(float(part) for part in value.split(",") if part.strip())


# Keys that describe the system; with a registry scenario they select a grid point.
_PARAM_KEYS = {
    "n_channels": _positive_int(),
    "alpha": _unit,
    "rho_ae": _unit,
    "rho_eb": _unit,
    "rho_ab": _unit,
    "sigma2_i": _variance,
    "sigma2_ii": _variance,
    "sigma2_ae": _variance,
    "sigma2_eb": _variance,
    "snr_i_db": _decibel,
    "snr_ii_db": _decibel,
    "power_delay": _variance,
}

_RUN_KEYS = {
    "scenario": str,
    "detector": _detectors,
    "target_pfa": _open_unit,
    "seed": _seed,
    "trials_h0": _positive_int(1000),
    "trials_h1": _positive_int(1000),
    "workers": _positive_int(),
    "out": str,
    "format": _choice(FORMATS),
    "sweep_axis": _choice(SWEEP_AXES),
    "sweep_values": _values,
    "realizations": _positive_int(),
}


@dataclass(frozen=True)
class RunConfig:
    scenario: str | None = None
    params: dict = field(default_factory=dict)
    detectors: tuple[str, ...] = ()
    target_pfa: float | None = None
    seed: int | None = None
    trials_h0: int | None = None
    trials_h1: int | None = None
    workers: int | None = None
    out: str | None = None
    format: str | None = None
    sweep_axis: str | None = None
    sweep_values: tuple[float, ...] = ()
    realizations: int | None = None


def parse_config(text: str) -> RunConfig:
    """Parse a line-oriented ``key=value`` document with ``#`` comments.

    Every violation is collected as ``line <n>: <key>: <message>`` and raised at once.
    """
    violations: list[str] = []
    seen: dict[str, int] = {}
    params: dict = {}
    run: dict = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            violations.append(f"line {lineno}: {line}: expected key=value")
            continue
        if key in seen:
            violations.append(f"line {lineno}: {key}: duplicate key (first set on line {seen[key]})")
            continue
        seen[key] = lineno

        if key in _PARAM_KEYS:
            parser, target = _PARAM_KEYS[key], params
        elif key in _RUN_KEYS:
            parser, target = _RUN_KEYS[key], run
        else:
            violations.append(f"line {lineno}: {key}: unknown key")
            continue
        try:
            target[key] = parser(value)
        except ValueError as exc:
            violations.append(f"line {lineno}: {key}: {exc}")

    if "sweep_values" in run and "sweep_axis" not in run:
        violations.append(f"line {seen['sweep_values']}: sweep_values: needs sweep_axis")

    if violations:
        raise ConfigError(violations)

    detectors = run.pop("detector", ())
    return RunConfig(params=params, detectors=detectors, **run)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"line 0: config: cannot read {path}: {exc.strerror}"]) from exc
    return parse_config(text)


def _family(config: RunConfig, registry: dict[str, ScenarioFamily]) -> ScenarioFamily:
    """The registry family named by the config, or an inline one built from its parameters."""
    if config.scenario is not None:
        if config.scenario not in registry:
            raise ConfigError([f"line 0: scenario: unknown scenario {config.scenario!r}"])
        family = registry[config.scenario]
        changes = {}
        if config.detectors:
            changes["detectors"] = config.detectors
        if config.target_pfa is not None:
            changes["target_pfa"] = config.target_pfa
        if config.realizations is not None:
            changes["realizations"] = config.realizations
        return replace(family, **changes)

    params = dict(config.params)
    missing = [key for key in ("n_channels", "rho_ae") if key not in params]
    if "sigma2_i" not in params and "snr_i_db" not in params:
        missing.append("snr_i_db")
    if "sigma2_ii" not in params and "snr_ii_db" not in params:
        missing.append("snr_ii_db")
    if missing:
        raise ConfigError([f"line 0: {key}: required for an inline scenario" for key in missing])
    return ScenarioFamily(
        name="inline",
        description="inline scenario",
        params=params,
        detectors=config.detectors or ("llr",),
        target_pfa=config.target_pfa or 1e-4,
        realizations=config.realizations,
    )


def system_params(config: RunConfig, registry: dict[str, ScenarioFamily] | None = None):
    """SystemParams described by the config, resolved against the registry when a scenario is named."""
    family = _family(config, registry or {})
    axes = config.params if config.scenario is not None else {}
    try:
        return family.system_params(**axes)
    except ValueError as exc:
        raise ConfigError([f"line 0: params: {exc}"]) from exc


def _format_number(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return f"{value:.6g}"


def _rows(results: list[ErrorRates]) -> list[dict]:
    rows = []
    for r in results:
        rows.append({
            "scenario": r.scenario,
            "axis_value": r.axis_value,
            "detector": r.detector,
            "attack": r.attack,
            "pfa": r.pfa,
            "pfa_lo": r.pfa_ci[0],
            "pfa_hi": r.pfa_ci[1],
            "pmd": r.pmd,
            "pmd_lo": r.pmd_ci[0],
            "pmd_hi": r.pmd_ci[1],
            "trials_h0": r.trials_h0,
            "trials_h1": r.trials_h1,
            "zero_event": r.zero_event,
        })
    return rows


def _rounded(value):
    if isinstance(value, float) and math.isfinite(value):
        return float(f"{value:.6g}")
    return value


def emit_report(results: list[ErrorRates], fmt: str = "csv", out: str | Path | None = None) -> str:
    """Render results as CSV, JSON or markdown, in the order given; also write ``out`` when set."""
    if not results:
        raise ValueError("no results to report")
    rows = _rows(results)

    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([
                row[col] if isinstance(row[col], str) else _format_number(row[col])
                for col in REPORT_COLUMNS
            ])
        document = buffer.getvalue()
    elif fmt == "json":
        payload = [{col: _rounded(row[col]) for col in REPORT_COLUMNS} for row in rows]
        document = json.dumps(payload, indent=2) + "\n"
    elif fmt == "markdown":
        env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), keep_trailing_newline=True)
        env.filters["num"] = _format_number
        template = env.get_template(TEMPLATE_NAME)
        document = template.render(rows=rows, results=results)
    else:
        raise ValueError(f"unknown report format {fmt!r}")

    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(document, encoding="utf-8")
    return document


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides config and AUTHSIM_SEED)")
    common.add_argument("--trials-h0", type=int, dest="trials_h0", help="H0 trials per point")
    common.add_argument("--trials-h1", type=int, dest="trials_h1", help="H1 trials per point")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--out", help="report path (stdout when omitted)")
    common.add_argument("--format", choices=FORMATS, help="report format")

    parser = argparse.ArgumentParser(
        prog="authsim",
        description="Monte Carlo evaluation of channel-based authentication",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("run", parents=[common], help="Run a scenario or a registry family")
    subparsers.add_parser("sweep", parents=[common], help="Sweep one axis of a scenario")
    subparsers.add_parser("list-scenarios", parents=[common], help="List registry scenarios")
    subparsers.add_parser("tune-ocnn", parents=[common], help="Tune and save an OCNN model")
    return parser


@dataclass(frozen=True)
class _Resolved:
    config: RunConfig
    budget: Budget
    workers: int
    fmt: str
    out: str | None


def _resolve(args: argparse.Namespace, settings: dict) -> _Resolved:
    """Merge flags, the run configuration and settings; flags win, then config, then settings."""
    config = load_config(args.config)
    sim = settings.get("simulation", {})

    def pick(flag, configured, setting, default=None):
        for value in (flag, configured, setting):
            if value is not None:
                return value
        return default

    seed = int(pick(args.seed, config.seed, sim.get("seed"), 20190601))
    trials_h0 = int(pick(args.trials_h0, config.trials_h0, sim.get("trials_h0"), 10_000_000))
    trials_h1 = int(pick(args.trials_h1, config.trials_h1, sim.get("trials_h1"), 1_000_000))
    workers = int(pick(args.jobs, config.workers, sim.get("workers"), 1))
    fmt = pick(args.format, config.format, settings.get("report", {}).get("format"), "csv")

    violations = []
    if not 0 <= seed < 2**64:
        violations.append(f"line 0: seed: {seed} is not a 64-bit unsigned seed")
    if trials_h0 < 1000 or trials_h1 < 1000:
        violations.append("line 0: trials: at least 1000 trials per hypothesis are required")
    if workers < 1:
        violations.append(f"line 0: workers: {workers} is below the minimum 1")
    if fmt not in FORMATS:
        violations.append(f"line 0: format: {fmt!r} is not one of {', '.join(FORMATS)}")
    if violations:
        raise ConfigError(violations)

    budget = Budget(
        seed=seed,
        trials_h0=trials_h0,
        trials_h1=trials_h1,
        knobs=Knobs.from_settings(settings),
        detector_options=detector_options(settings),
    )
    return _Resolved(config, budget, workers, fmt, pick(args.out, config.out, None))


def _run(resolved: _Resolved, registry: dict[str, ScenarioFamily]) -> list[ErrorRates]:
    config = resolved.config
    family = _family(config, registry)
    if config.scenario is not None and not config.params:
        return run_family(family, resolved.budget, resolved.workers)
    axes = config.params if config.scenario is not None else {}
    return [
        run_scenario(family.point(resolved.budget, detector, **axes), resolved.workers)
        for detector in family.detectors
    ]


def _sweep(resolved: _Resolved, registry: dict[str, ScenarioFamily]) -> list[ErrorRates]:
    config = resolved.config
    if config.sweep_axis is None:
        raise ConfigError(["line 0: sweep_axis: required by the sweep command"])
    family = _family(config, registry)
    axes = config.params if config.scenario is not None else {}
    results = []
    for detector in family.detectors:
        base = family.point(resolved.budget, detector, **axes)
        results.extend(sweep(base, config.sweep_axis, config.sweep_values, resolved.workers))
    return results


def _tune_ocnn(resolved: _Resolved, registry: dict[str, ScenarioFamily]) -> str:
    config = resolved.config
    if resolved.out is None:
        raise ConfigError(["line 0: out: tune-ocnn needs an output path"])
    family = _family(config, registry)
    detector = next((d for d in family.detectors if d.startswith("ocnn")), "ocnn:1KNN")
    axes = config.params if config.scenario is not None else {}
    scenario = family.point(resolved.budget, detector, **axes)
    seg, h_ab, _ = channel_realization(scenario.params, RandomStream(scenario.seed), 0)
    model = train_ocnn(scenario, seg, h_ab, resolved.workers)
    save_model(model, resolved.out)
    logger.bind(variant=str(model.variant), j=model.j, k=model.k, path=resolved.out).info("ocnn_model_saved")
    return f"{model.variant} j={model.j} k={model.k} theta_d={model.theta_d:.6g} -> {resolved.out}\n"


def _list_scenarios(registry: dict[str, ScenarioFamily]) -> str:
    lines = []
    for name, family in registry.items():
        grid = " x ".join(f"{axis}[{len(values)}]" for axis, values in family.grid.items())
        lines.append(f"{name}\t{','.join(family.detectors)}\t{grid}\t{family.description}")
    return "\n".join(lines) + "\n"


def run(argv: list[str] | None = None, settings: dict | None = None) -> int:
    """Entry point for every verb; returns the process exit code."""
    args = _build_parser().parse_args(argv)
    settings = settings or {}

    try:
        registry = load_registry()
        if args.command == "list-scenarios":
            sys.stdout.write(_list_scenarios(registry))
            return EXIT_OK

        resolved = _resolve(args, settings)
        if args.command == "tune-ocnn":
            sys.stdout.write(_tune_ocnn(resolved, registry))
            return EXIT_OK

        results = _sweep(resolved, registry) if args.command == "sweep" else _run(resolved, registry)
        if not results:
            logger.bind(command=args.command).warning("no_results")
            return EXIT_OK
        document = emit_report(results, resolved.fmt, resolved.out)
        if resolved.out is None:
            sys.stdout.write(document)
        return EXIT_OK
    except ConfigError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        logger.bind(violations=len(exc.violations)).error("config_error")
        return EXIT_CONFIG
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        logger.bind(error=str(exc)).error("config_error")
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        logger.bind(error=str(exc)).error("report_write_failed")
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(str(exc), file=sys.stderr)
        logger.bind(error=str(exc)).error("calibration_failed")
        return EXIT_CALIBRATION
