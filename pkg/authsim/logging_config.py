import datetime
import json
import logging
import sys
from contextvars import ContextVar
from pathlib import Path

from loguru import logger

# --- Context variables injected into every log record ---
_ctx_scenario: ContextVar[str | None] = ContextVar("scenario", default=None)
_ctx_detector: ContextVar[str | None] = ContextVar("detector", default=None)
_ctx_step: ContextVar[str | None] = ContextVar("step", default=None)

_CONTEXT_FIELDS = ("scenario", "detector", "step")


def bind_context(
    scenario: str | None = None,
    detector: str | None = None,
    step: str | None = None,
) -> None:
    """Set context variables for the current scenario run."""
    if scenario is not None:
        _ctx_scenario.set(scenario)
    if detector is not None:
        _ctx_detector.set(detector)
    if step is not None:
        _ctx_step.set(step)


def _context_patcher(record: dict) -> None:
    """Inject contextvars into the log record's extra dict, then pre-render the JSON line."""
    extra = record["extra"]
    extra.setdefault("scenario", _ctx_scenario.get())
    extra.setdefault("detector", _ctx_detector.get())
    extra.setdefault("step", _ctx_step.get())
    extra["json"] = json.dumps(_payload(record), default=str)


def _payload(record: dict) -> dict:
    extra = record["extra"]
    payload: dict = {
        "timestamp": record["time"].astimezone(datetime.timezone.utc).strftime(
            "%Y-%m-%dT%H:%M:%S.%f"
        )[:-3] + "Z",
        "level": record["level"].name,
        "logger": record["name"],
        "message": record["message"],
    }

    # Optional context fields, omitted if None
    for field in _CONTEXT_FIELDS:
        val = extra.get(field)
        if val is not None:
            payload[field] = str(val)

    # Event-specific extra fields (duration_ms, trials, pfa, pmd, ...)
    skip = {*_CONTEXT_FIELDS, "json"}
    for key, val in extra.items():
        if key not in skip and val is not None:
            payload[key] = val

    if record["exception"] is not None:
        payload["exception"] = repr(record["exception"].value)
    return payload


def _stderr_sink(message) -> None:
    # stdout carries reports, so logs go to stderr
    print(message.record["extra"]["json"], file=sys.stderr, flush=True)


class _InterceptHandler(logging.Handler):
    """Bridge stdlib logging into loguru so third-party libraries also emit JSON."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = sys._getframe(6), 6
        while frame and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(
            level, record.getMessage()
        )


def setup_logging(level: str = "INFO", log_dir: str | None = "logs") -> None:
    """Configure loguru with JSON stderr + rotating file sinks.

    Call once at process startup (from main.py) before any other logging.
    Pass ``log_dir=None`` to skip the file sink.
    """
    # Remove loguru's default stderr handler
    logger.remove()

    # Register the context patcher so it runs on every record
    logger.configure(patcher=_context_patcher)

    logger.add(_stderr_sink, level=level, colorize=False, format="{message}")

    if log_dir is not None:
        log_path = Path(log_dir) / "authsim.log"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            str(log_path),
            level=level,
            rotation="50 MB",
            retention=5,
            colorize=False,
            format="{extra[json]}",
            encoding="utf-8",
        )

    logging.basicConfig(handlers=[_InterceptHandler()], level=logging.INFO, force=True)
