"""Variant sweeps and the comparison table they produce.

A sweep file is YAML (or JSON)::

    name: mnist-variants
    base: mnist_baseline.cfg        # relative to the sweep file
    settings:                       # shared overrides
      train.epochs: 30
    standard: mnist                 # or an explicit list:
    variants:
      - name: 1H/NoMLP/symmetry
        settings: {model.heads: 1, model.mlp_enabled: false, model.qk_mode: shared}

Variant names follow the ``<heads>H/<MLP|NoMLP>/<modification>`` labels.
"""

import csv
import io
import json
import logging
import math
import re
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import yaml

from pfmsoft.minformer.config import format_value, read_config_file
from pfmsoft.minformer.counting import count_params
from pfmsoft.minformer.data import DataConfig, Dataset, Split, load_split
from pfmsoft.minformer.encoder import ModelConfig
from pfmsoft.minformer.errors import ConfigError, DataFormatError, MinformerError
from pfmsoft.minformer.experiment import ExperimentConfig, experiment_from_values
from pfmsoft.minformer.serializer import DataclassSerializer, check_file
from pfmsoft.minformer.train import train

logger = logging.getLogger(__name__)

SWEEP_CSV = "sweep.csv"
SWEEP_TXT = "sweep.txt"
TABLE_COLUMNS = (
    "name",
    "heads",
    "mlp",
    "modification",
    "parameters",
    "q",
    "train_loss",
    "val_loss",
    "train_acc",
    "val_acc",
    "status",
)

_UNCHANGED: dict[str, Any] = {}
_WQK = {"model.qk_mode": "collapsed"}
_WQK_NO_VO = {"model.qk_mode": "collapsed", "model.vo_mode": "identity"}
_SYMMETRY = {"model.qk_mode": "shared"}

_MNIST_ROWS: tuple[tuple[int, bool, str, dict[str, Any]], ...] = (
    (1, True, "unchanged", _UNCHANGED),
    (4, True, "unchanged", _UNCHANGED),
    (1, True, "Wqk", _WQK),
    (1, True, "Wqk+noWv.Vo", _WQK_NO_VO),
    (1, False, "unchanged", _UNCHANGED),
    (4, False, "unchanged", _UNCHANGED),
    (1, False, "symmetry", _SYMMETRY),
    (4, False, "symmetry", _SYMMETRY),
    (1, False, "Wqk", _WQK),
    (1, False, "Wqk+noWv.Vo", _WQK_NO_VO),
)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    settings: dict[str, str] = field(default_factory=dict)


@dataclass
class SweepSpec:
    """Named variant configs sharing a base config and shared settings."""

    name: str = "sweep"
    base: str | None = None
    settings: dict[str, str] = field(default_factory=dict)
    variants: list[VariantSpec] = field(default_factory=list)

    def member_values(self, variant: VariantSpec, overrides: Mapping[str, str] | None = None) -> dict[str, str]:
        """Raw config values of one member: base, then shared settings, then the variant, then overrides."""
        values = read_config_file(Path(self.base)) if self.base else {}
        values.update(self.settings)
        values.update(variant.settings)
        values.update(overrides or {})
        return values

    def validate(self, overrides: Mapping[str, str] | None = None) -> list[ExperimentConfig]:
        """Check the sweep and return each member's experiment config.

        Raises:
            ConfigError: For an empty sweep, duplicate names, or an invalid member.
        """
        if not self.variants:
            raise ConfigError(f"sweep {self.name!r} has no variants")
        names = [v.name for v in self.variants]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigError(f"sweep {self.name!r} repeats variant names {duplicates}")
        experiments = []
        for variant in self.variants:
            try:
                experiments.append(experiment_from_values(self.member_values(variant, overrides)))
            except ConfigError as error:
                raise ConfigError(f"variant {variant.name!r}: {error}") from error
        return experiments


def _stringify(settings: Mapping[str, Any] | None) -> dict[str, str]:
    return {str(k): format_value(v) for k, v in (settings or {}).items()}


def standard_variants(dataset: str) -> list[VariantSpec]:
    """The variant list compared on MNIST (10 rows) or CIFAR-10 (9 rows)."""
    rows = list(_MNIST_ROWS)
    if dataset == "cifar10":
        rows.remove((1, True, "Wqk", _WQK))
    elif dataset not in ("mnist", "synthetic"):
        raise ConfigError(f"no standard variants for dataset {dataset!r}")
    return [
        VariantSpec(
            name=f"{heads}H/{'MLP' if mlp else 'NoMLP'}/{label}",
            settings=_stringify({"model.heads": heads, "model.mlp_enabled": mlp, **extra}),
        )
        for heads, mlp, label, extra in rows
    ]


def _sweep_from_simple(simple: Any, base_dir: Path | None = None) -> SweepSpec:
    if not isinstance(simple, dict):
        raise ConfigError(f"a sweep file must hold a mapping, got {type(simple).__name__}")
    unknown = set(simple) - {"name", "base", "settings", "variants", "standard"}
    if unknown:
        raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
    base = simple.get("base")
    if base is not None and base_dir is not None and not Path(base).is_absolute():
        base = str(base_dir / base)
    variants = []
    for entry in simple.get("variants") or []:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"each sweep variant needs a name, got {entry!r}")
        variants.append(VariantSpec(str(entry["name"]), _stringify(entry.get("settings"))))
    if simple.get("standard"):
        variants = standard_variants(str(simple["standard"])) + variants
    return SweepSpec(
        name=str(simple.get("name", "sweep")),
        base=base,
        settings=_stringify(simple.get("settings")),
        variants=variants,
    )


def load_sweep(path: Path) -> SweepSpec:
    """Read a YAML or JSON sweep file; ``base`` resolves relative to the file.

    Raises:
        ConfigError: If the file does not parse or does not describe a sweep.
    """
    serializer = DataclassSerializer[SweepSpec, dict[str, Any]](
        complex_factory=lambda simple: _sweep_from_simple(simple, path.parent)
    )
    try:
        if path.suffix == ".json":
            return serializer.load_from_json(path)
        return serializer.load_from_yaml(path)
    except (yaml.YAMLError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot parse sweep file {path}: {error}") from error


def modification_label(model: ModelConfig) -> str:
    """Table label of a model's attention matrix variant."""
    parts = []
    match model.qk_mode:
        case "collapsed":
            parts.append("Wqk")
        case "shared":
            parts.append("symmetry")
        case "cholesky" | "mirrored":
            parts.append(model.qk_mode)
    match model.vo_mode:
        case "collapsed":
            parts.append("Wvo")
        case "identity":
            parts.append("noWv.Vo")
    return "+".join(parts) or "unchanged"


@dataclass
class SweepRow:
    name: str
    heads: int
    mlp: bool
    modification: str
    parameters: int
    q: float | None = None
    train_loss: float | None = None
    val_loss: float | None = None
    train_acc: float | None = None
    val_acc: float | None = None
    status: str = "ok"


def slug(name: str) -> str:
    """Directory-safe form of a variant name."""
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", name).strip("_") or "variant"


@lru_cache(maxsize=8)
def _cached_split(
    data: DataConfig, split: Split, image_shape: tuple[int, int, int], classes: int
) -> Dataset:
    return load_split(data, split, image_shape, classes)


def run_member(name: str, values: dict[str, str], out_dir: str, overwrite: bool = False) -> SweepRow:
    """Train one sweep member into ``out_dir``; failures become a ``failed`` row."""
    experiment = experiment_from_values(values)
    model = experiment.model
    row = SweepRow(
        name=name,
        heads=model.heads,
        mlp=model.mlp_enabled,
        modification=modification_label(model),
        parameters=count_params(model).total,
    )
    try:
        train_ds = _cached_split(experiment.data, "train", model.image_shape, model.classes)
        val_ds = _cached_split(experiment.data, "test", model.image_shape, model.classes)
        report = train(model, train_ds, val_ds, experiment.train, Path(out_dir), overwrite=overwrite)
    except (MinformerError, OSError, ValueError) as error:
        logger.error("sweep member %s failed: %s", name, error)
        row.status = "failed"
        return row
    final = report.final
    row.q = report.q
    row.train_loss, row.val_loss = final.train_loss, final.val_loss
    row.train_acc, row.val_acc = final.train_acc, final.val_acc
    return row


def run_sweep(
    sweep: SweepSpec,
    out_dir: Path,
    overrides: Mapping[str, str] | None = None,
    jobs: int = 1,
    overwrite: bool = False,
) -> list[SweepRow]:
    """Run every member, each in its own sub-directory, rows in declaration order."""
    sweep.validate(overrides)
    members = [
        (v.name, sweep.member_values(v, overrides), str(out_dir / slug(v.name)), overwrite) for v in sweep.variants
    ]
    logger.info("sweep %s: %d variants, %d job(s)", sweep.name, len(members), jobs)
    if jobs <= 1:
        rows = [run_member(*m) for m in members]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_member, *zip(*members, strict=True)))
    save_table(out_dir, rows, overwrite=overwrite)
    return rows


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def table_csv_text(rows: list[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        writer.writerow([_cell(getattr(row, c)) for c in TABLE_COLUMNS])
    return buffer.getvalue()


def parse_table_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
        raise DataFormatError(f"sweep csv header must be {TABLE_COLUMNS}")

    def opt(text: str) -> float | None:
        return None if text == "" else float(text)

    return [
        SweepRow(
            name=r["name"],
            heads=int(r["heads"]),
            mlp=r["mlp"] == "yes",
            modification=r["modification"],
            parameters=int(r["parameters"]),
            q=opt(r["q"]),
            train_loss=opt(r["train_loss"]),
            val_loss=opt(r["val_loss"]),
            train_acc=opt(r["train_acc"]),
            val_acc=opt(r["val_acc"]),
            status=r["status"],
        )
        for r in reader
    ]


def table_text(rows: list[SweepRow]) -> str:
    """Aligned plain-text comparison table."""
    header = ["Variant", "#Heads", "MLP?", "Modification", "#Parameters", "Q", "Train loss", "Val. loss", "Train acc. [%]", "Val. acc. [%]"]

    def num(value: float | None, fmt: str) -> str:
        return "failed" if value is None or math.isnan(value) else format(value, fmt)

    body = [
        [
            r.name,
            str(r.heads),
            "yes" if r.mlp else "no",
            r.modification,
            f"{r.parameters:,}",
            num(r.q, ".2f"),
            num(r.train_loss, ".4f"),
            num(r.val_loss, ".4f"),
            num(None if r.train_acc is None else 100 * r.train_acc, ".2f"),
            num(None if r.val_acc is None else 100 * r.val_acc, ".2f"),
        ]
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    left = {0, 2, 3}
    lines = [
        "  ".join(cell.ljust(w) if i in left else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths, strict=True)))
        for line in [header, *body]
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def save_table(out_dir: Path, rows: list[SweepRow], overwrite: bool = False) -> None:
    out_dir.mkdir(exist_ok=True, parents=True)
    for name, text in ((SWEEP_CSV, table_csv_text(rows)), (SWEEP_TXT, table_text(rows))):
        check_file(out_dir / name, overwrite)
        (out_dir / name).write_text(text, encoding="utf-8")
