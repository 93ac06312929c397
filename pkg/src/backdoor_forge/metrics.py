"""Attack/defense metrics and machine-readable reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

REPORT_SCHEMA_VERSION = 1
DAC_DEFINITION = "accuracy of the binary poison/clean verdict over the full evaluated set; positive class = poisoned"


class MetricError(ValueError):
    pass


class ReportVersionError(ValueError):
    pass


def _pair(predictions, labels):
    p, l = np.asarray(predictions), np.asarray(labels)
    if p.shape != l.shape:
        raise MetricError(f"length mismatch: {p.shape} predictions vs {l.shape} labels")
    if p.size == 0:
        raise MetricError("empty input")
    return p, l


def accuracy(predictions, labels) -> float:
    p, l = _pair(predictions, labels)
    return float(np.mean(p == l))


def asr(predictions, target_label: int, original_labels=None) -> float:
    """Share of curated predictions equal to the target.  Passing the curated
    set's original labels enforces the exclusion contract."""
    p = np.asarray(predictions)
    if p.size == 0:
        raise MetricError("empty curated set")
    if original_labels is not None:
        o = np.asarray(original_labels)
        if o.shape != p.shape:
            raise MetricError("original_labels length differs from predictions")
        if np.any(o == target_label):
            raise MetricError("curated set contains samples whose original label is the target")
    return float(np.mean(p == target_label))


def rac(predictions, original_labels) -> float:
    p, o = _pair(predictions, original_labels)
    return float(np.mean(p == o))


@dataclass
class MetricsReport:
    cac: float | None = None
    bac: float | None = None
    asr: float | None = None
    rac: float | None = None
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("cac", "bac", "asr", "rac"):
            v = getattr(self, k)
            if v is not None and not 0 <= v <= 1:
                raise MetricError(f"{k}={v} outside [0, 1]")
        if self.asr is not None and self.rac is not None and self.asr + self.rac > 1 + 1e-12:
            raise MetricError("asr + rac exceeds 1")

    def to_json(self):
        return asdict(self)


@dataclass
class DetectionReport:
    dac: float
    rec: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float = 0.0

    def to_json(self):
        return asdict(self)


def detection_metrics(flags, truth) -> DetectionReport:
    f, t = _pair(np.asarray(flags, dtype=bool), np.asarray(truth, dtype=bool))
    tp = int(np.sum(f & t))
    fp = int(np.sum(f & ~t))
    tn = int(np.sum(~f & ~t))
    fn = int(np.sum(~f & t))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return DetectionReport((tp + tn) / f.size, rec, f1, tp, fp, tn, fn, prec)


# ---------------------------------------------------------------------------
# run records and report files


@dataclass
class CellResult:
    """One attack x defense x noise-variant cell."""
    cell_id: str
    attack: str
    defense: str
    variant: str
    modality: str
    status: str = "ok"  # ok | skipped | failed
    before: dict | None = None
    after: dict | None = None
    detection: dict | None = None
    extra: dict = field(default_factory=dict)
    note: str = ""


@dataclass
class RunRecord:
    experiment_id: str
    toolkit_version: str
    seeds: dict
    configs: dict
    cells: list = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "dac_definition": DAC_DEFINITION,
                "experiment_id": self.experiment_id, "toolkit_version": self.toolkit_version,
                "seeds": self.seeds, "configs": self.configs, "timestamps": self.timestamps,
                "cells": [asdict(c) if isinstance(c, CellResult) else c for c in self.cells]}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


CSV_COLUMNS = ["cell_id", "modality", "attack", "variant", "defense", "status",
               "CAC", "BAC", "ASR", "RAC", "BAC_after", "ASR_after", "RAC_after", "DAC", "REC", "F1", "note"]


def pct(v):
    return "" if v is None else f"{100 * v:.2f}"


def csv_rows(record: RunRecord) -> list[dict]:
    """One row per completed cell (ok or skipped); failed cells live only in JSON."""
    rows = []
    for c in record.cells:
        c = c if isinstance(c, dict) else asdict(c)
        if c["status"] == "failed":
            continue
        b, a, d = c.get("before") or {}, c.get("after") or {}, c.get("detection") or {}
        rows.append({"cell_id": c["cell_id"], "modality": c["modality"], "attack": c["attack"],
                     "variant": c["variant"], "defense": c["defense"], "status": c["status"],
                     "CAC": pct(b.get("cac")), "BAC": pct(b.get("bac")), "ASR": pct(b.get("asr")),
                     "RAC": pct(b.get("rac")), "BAC_after": pct(a.get("bac")), "ASR_after": pct(a.get("asr")),
                     "RAC_after": pct(a.get("rac")), "DAC": pct(d.get("dac")), "REC": pct(d.get("rec")),
                     "F1": pct(d.get("f1")), "note": c.get("note", "")})
    return rows


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def emit_report(record: RunRecord, directory, formats=("json", "csv")) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = d / "report.json"
        p.write_text(canonical_json(record.to_json()))
        written.append(p)
    if "csv" in formats:
        p = d / "report.csv"
        write_csv(p, CSV_COLUMNS, csv_rows(record))
        written.append(p)
    return written


def load_report(path) -> RunRecord:
    obj = json.loads(Path(path).read_text())
    if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ReportVersionError(f"report schema {obj.get('schema_version')} unsupported "
                                 f"(expected {REPORT_SCHEMA_VERSION})")
    cells = [CellResult(**c) for c in obj["cells"]]
    return RunRecord(obj["experiment_id"], obj["toolkit_version"], obj["seeds"], obj["configs"],
                     cells, obj.get("timestamps", {}))
