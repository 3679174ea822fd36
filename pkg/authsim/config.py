import os
import re
from pathlib import Path

import yaml


CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"

# ${NAME} or ${NAME:-default}; an empty variable counts as unset when a default is given
_PLACEHOLDER = re.compile(r"\$\{(\w+)(?::-([^}]*))?\}")


def _lookup(match: re.Match) -> str:
    name, default = match.group(1), match.group(2)
    value = os.environ.get(name)
    if default is not None and not value:
        return default
    if value is None:
        raise ValueError(f"Environment variable {name} is not set")
    return value


def _numeric(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _interpolate(value: str):
    """Substitute placeholders; a value that is a single placeholder becomes a number when it parses as one."""
    whole = _PLACEHOLDER.fullmatch(value)
    if whole:
        return _numeric(_lookup(whole))
    return _PLACEHOLDER.sub(_lookup, value)


def _walk(node):
    if isinstance(node, str):
        return _interpolate(node)
    if isinstance(node, dict):
        return {key: _walk(item) for key, item in node.items()}
    if isinstance(node, list):
        return [_walk(item) for item in node]
    return node


def _read_yaml(path: Path) -> dict:
    with open(path) as f:
        return yaml.safe_load(f) or {}


def load_settings(path: Path | None = None) -> dict:
    """Simulation knobs from ``config/settings.yaml`` with environment placeholders resolved."""
    return _walk(_read_yaml(path or CONFIG_DIR / "settings.yaml"))


def load_scenarios(path: Path | None = None) -> dict[str, dict]:
    """Registry families keyed by name; every entry must carry ``params``."""
    path = path or CONFIG_DIR / "scenarios.yaml"
    families = _read_yaml(path).get("scenarios") or {}
    for name, entry in families.items():
        if not isinstance(entry, dict) or "params" not in entry:
            raise ValueError(f"{path.name}: scenario {name!r} has no params")
    return families
