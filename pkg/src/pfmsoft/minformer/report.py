"""Run reports and how they are written to disk.

A run directory holds ``report.csv`` (one row per epoch),
``summary.txt`` (P, Q, config hash, wall-clock and the canonical config)
and ``report.json`` (the whole report, for lossless reloading).
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pfmsoft.minformer.errors import DataFormatError
from pfmsoft.minformer.serializer import DataclassSerializer, check_file

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")
REPORT_CSV = "report.csv"
SUMMARY_TXT = "summary.txt"
REPORT_JSON = "report.json"


@dataclass(frozen=True)
class EpochRow:
    """Metrics after one epoch. Validation values are None on epochs without evaluation."""

    epoch: int
    train_loss: float
    val_loss: float | None
    train_acc: float
    val_acc: float | None


@dataclass
class RunReport:
    """Outcome of one training run: one line of a variant comparison table."""

    rows: list[EpochRow] = field(default_factory=list)
    parameters: int = 0
    q: float = math.nan
    examples: int = 0
    classes: int = 0
    wall_clock: float = 0.0
    config_hash: str = ""
    config_text: str = ""

    @property
    def final(self) -> EpochRow:
        if not self.rows:
            raise ValueError("report has no epochs")
        return self.rows[-1]


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _opt(text: str) -> float | None:
    return None if text == "" else float(text)


def report_csv_text(report: RunReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in report.rows:
        writer.writerow(
            [row.epoch, _fmt(row.train_loss), _fmt(row.val_loss), _fmt(row.train_acc), _fmt(row.val_acc)]
        )
    return buffer.getvalue()


def parse_report_csv(text: str) -> list[EpochRow]:
    """Epoch rows of a ``report.csv`` text.

    Raises:
        DataFormatError: If the header differs from the fixed one.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise DataFormatError(f"report csv header must be {CSV_HEADER}, got {header}")
    return [
        EpochRow(int(epoch), float(tl), _opt(vl), float(ta), _opt(va)) for epoch, tl, vl, ta, va in reader
    ]


def summary_text(report: RunReport) -> str:
    final = report.final
    lines = [
        f"parameters: {report.parameters}",
        f"q: {report.q:.4f}",
        f"examples: {report.examples}",
        f"classes: {report.classes}",
        f"epochs: {final.epoch}",
        f"final_train_loss: {final.train_loss:.6f}",
        f"final_val_loss: {'' if final.val_loss is None else f'{final.val_loss:.6f}'}",
        f"final_train_acc: {final.train_acc:.4f}",
        f"final_val_acc: {'' if final.val_acc is None else f'{final.val_acc:.4f}'}",
        f"config_hash: {report.config_hash}",
        f"wall_clock_seconds: {report.wall_clock:.3f}",
        "",
        "[config]",
        report.config_text.rstrip("\n"),
    ]
    return "\n".join(lines) + "\n"


def _report_from_simple(simple: dict[str, Any]) -> RunReport:
    rows = [EpochRow(**row) for row in simple.pop("rows")]
    return RunReport(rows=rows, **simple)


REPORT_SERIALIZER = DataclassSerializer[RunReport, dict[str, Any]](complex_factory=_report_from_simple)


def save_report(out_dir: Path, report: RunReport, overwrite: bool = False) -> None:
    """Write report.csv, summary.txt and report.json into ``out_dir``."""
    out_dir.mkdir(exist_ok=True, parents=True)
    for name, text in ((REPORT_CSV, report_csv_text(report)), (SUMMARY_TXT, summary_text(report))):
        path = out_dir / name
        check_file(path, overwrite)
        path.write_text(text, encoding="utf-8")
    REPORT_SERIALIZER.save_as_json(out_dir / REPORT_JSON, report, overwrite=overwrite)
    logger.debug("wrote report files to %s", out_dir)


def load_report(out_dir: Path) -> RunReport:
    return REPORT_SERIALIZER.load_from_json(out_dir / REPORT_JSON)
