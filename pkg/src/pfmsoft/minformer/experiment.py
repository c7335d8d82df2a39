"""Experiment configs: the ``model.``, ``train.`` and ``data.`` sections together."""

import dataclasses
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from pfmsoft.minformer.config import (
    build_section,
    canonical_text,
    config_hash,
    parse_lines,
    read_config_file,
)
from pfmsoft.minformer.data import DataConfig
from pfmsoft.minformer.encoder import ModelConfig
from pfmsoft.minformer.errors import ConfigError
from pfmsoft.minformer.train import TrainConfig

logger = logging.getLogger(__name__)

SECTION_TYPES: dict[str, type] = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
SECTIONS = tuple(SECTION_TYPES)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def sections(self) -> dict[str, object]:
        return {"model": self.model, "train": self.train, "data": self.data}

    def text(self) -> str:
        return canonical_text(self.sections())

    def hash(self) -> str:
        return config_hash(self.sections())


def qualify(key: str) -> str:
    """Full ``section.key`` form of a key; a bare key must belong to exactly one section.

    Raises:
        ConfigError: For an unknown section, or a bare key that is unknown or ambiguous.
    """
    section, sep, _ = key.partition(".")
    if sep:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}; keys start with one of {SECTIONS}")
        return key
    owners = [name for name, cls in SECTION_TYPES.items() if key in {f.name for f in dataclasses.fields(cls)}]
    if len(owners) != 1:
        reason = "is not a known key" if not owners else f"is ambiguous between {owners}"
        raise ConfigError(f"config key {key!r} {reason}; use section.key")
    return f"{owners[0]}.{key}"


def experiment_from_values(values: Mapping[str, str]) -> ExperimentConfig:
    """Build an experiment from raw ``section.key -> value`` strings.

    Raises:
        ConfigError: For keys outside the known sections or any invalid value.
    """
    qualified = {qualify(key): value for key, value in values.items()}
    return ExperimentConfig(
        model=build_section(ModelConfig, qualified, "model"),
        train=build_section(TrainConfig, qualified, "train"),
        data=build_section(DataConfig, qualified, "data"),
    )


def load_experiment(path: Path | None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read a config file (or start from defaults) and apply overrides on top."""
    values: dict[str, str] = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        values[qualify(key)] = value
    logger.debug("resolved config values from %s: %s", path, values)
    return experiment_from_values(values)


def parse_experiment(text: str) -> ExperimentConfig:
    return experiment_from_values(parse_lines(text))
