"""Flat ``section.key = value`` configuration text.

A config file holds one assignment per line; ``#`` starts a comment and
blank lines are ignored::

    model.width = 64
    model.qk_mode = cholesky   # single head only
    train.epochs = 30

Values are coerced to the type of the dataclass field they set. The
canonical form of a config is its key-sorted lines, and the config hash
is the sha256 of that text.
"""

import dataclasses
import hashlib
import logging
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal, get_args, get_origin, get_type_hints

from pfmsoft.minformer.errors import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_lines(text: str, source: str = "<text>") -> dict[str, str]:
    """Raw ``key -> value`` strings of a config text; later lines win."""
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def parse_overrides(assignments: Iterable[str]) -> dict[str, str]:
    """``--set key=value`` strings as a mapping; the last writer wins."""
    values: dict[str, str] = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def read_config_file(path: Path) -> dict[str, str]:
    """Raw values of a config file."""
    return parse_lines(path.read_text(encoding="utf-8"), source=str(path))


def coerce(value: str, annotation: Any, key: str) -> Any:
    """Convert a config string to ``annotation``'s type."""
    if get_origin(annotation) is Literal:
        choices = get_args(annotation)
        if value not in choices:
            raise ConfigError(f"{key}: {value!r} is not one of {choices}")
        return value
    try:
        if annotation is bool:
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {annotation.__name__}") from None
    return value


def build_section[T](cls: type[T], values: Mapping[str, str], prefix: str) -> T:
    """Instantiate dataclass ``cls`` from the ``prefix.*`` entries of ``values``.

    Raises:
        ConfigError: For unknown keys, unreadable values, or a failing
            dataclass validation.
    """
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    kwargs: dict[str, Any] = {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section != prefix:
            continue
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[name] = coerce(value, hints[name], key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid {prefix} config: {error}") from error


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def section_lines(prefix: str, obj: Any) -> list[str]:
    """``prefix.field = value`` lines of a dataclass instance."""
    return [
        f"{prefix}.{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)
    ]


def canonical_text(sections: Mapping[str, Any]) -> str:
    """Key-sorted config text of several dataclass sections."""
    lines: list[str] = []
    for prefix, obj in sections.items():
        lines.extend(section_lines(prefix, obj))
    return "\n".join(sorted(lines)) + "\n"


def config_hash(sections: Mapping[str, Any]) -> str:
    """sha256 hex digest of :func:`canonical_text`."""
    return hashlib.sha256(canonical_text(sections).encode("utf-8")).hexdigest()
