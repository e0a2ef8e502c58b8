"""Evaluation reports with exact round-trip CSV and JSON serialization.

The CSV column order is fixed and versioned through the schema field; floats
are written with repr so parse(emit(report)) == report bit-for-bit."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import ContractError, FormatError

SCHEMA = "advlab-report/1"

CSV_COLUMNS = [
    "schema",
    "experiment_id",
    "dataset",
    "attack",
    "training_attack",
    "benign_accuracy",
    "auc",
    "success_ratio",
    "mean_l2_255",
    "mean_linf",
    "curve",
]


@dataclass
class EvalReport:
    experiment_id: str
    dataset: str
    attack: str
    training_attack: str
    benign_accuracy: float | None = None
    auc: float | None = None
    success_ratio: float | None = None
    mean_l2_255: float | None = None
    mean_linf: float | None = None
    curve: tuple = ()
    schema: str = SCHEMA

    def __post_init__(self):
        self.curve = tuple((float(e), float(r)) for e, r in self.curve)
        for name in ("auc", "success_ratio"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        eps = [e for e, _ in self.curve]
        if any(nxt <= prev for prev, nxt in zip(eps, eps[1:])):
            raise ContractError("curve epsilons must be strictly increasing")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse_float(s: str):
    return None if s == "" else float(s)


def _fmt_curve(curve) -> str:
    return ";".join(f"{repr(e)}:{repr(r)}" for e, r in curve)


def _parse_curve(s: str):
    if not s:
        return ()
    pairs = []
    for part in s.split(";"):
        e, _, r = part.partition(":")
        pairs.append((float(e), float(r)))
    return tuple(pairs)


def emit_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerow(
        [
            report.schema,
            report.experiment_id,
            report.dataset,
            report.attack,
            report.training_attack,
            _fmt(report.benign_accuracy),
            _fmt(report.auc),
            _fmt(report.success_ratio),
            _fmt(report.mean_l2_255),
            _fmt(report.mean_linf),
            _fmt_curve(report.curve),
        ]
    )
    return buf.getvalue()


def parse_csv(text: str) -> EvalReport:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) != 2 or rows[0] != CSV_COLUMNS:
        raise FormatError("report CSV must hold the fixed header and one data row")
    row = dict(zip(CSV_COLUMNS, rows[1]))
    if row["schema"] != SCHEMA:
        raise FormatError(f"unknown report schema {row['schema']!r}")
    return EvalReport(
        experiment_id=row["experiment_id"],
        dataset=row["dataset"],
        attack=row["attack"],
        training_attack=row["training_attack"],
        benign_accuracy=_parse_float(row["benign_accuracy"]),
        auc=_parse_float(row["auc"]),
        success_ratio=_parse_float(row["success_ratio"]),
        mean_l2_255=_parse_float(row["mean_l2_255"]),
        mean_linf=_parse_float(row["mean_linf"]),
        curve=_parse_curve(row["curve"]),
    )


def emit_json(report: EvalReport) -> str:
    doc = {
        "schema": report.schema,
        "experiment_id": report.experiment_id,
        "dataset": report.dataset,
        "attack": report.attack,
        "training_attack": report.training_attack,
        "benign_accuracy": report.benign_accuracy,
        "auc": report.auc,
        "success_ratio": report.success_ratio,
        "mean_l2_255": report.mean_l2_255,
        "mean_linf": report.mean_linf,
        "curve": [[e, r] for e, r in report.curve],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def parse_json(text: str) -> EvalReport:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise FormatError(f"unknown report schema {doc.get('schema')!r}")
    return EvalReport(
        experiment_id=doc["experiment_id"],
        dataset=doc["dataset"],
        attack=doc["attack"],
        training_attack=doc["training_attack"],
        benign_accuracy=doc["benign_accuracy"],
        auc=doc["auc"],
        success_ratio=doc["success_ratio"],
        mean_l2_255=doc["mean_l2_255"],
        mean_linf=doc["mean_linf"],
        curve=tuple((e, r) for e, r in doc["curve"]),
    )
