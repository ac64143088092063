"""Comparison reports across pipeline runs.

A comparison has three parts: an accuracy grid (rows = decompositions,
columns = pipelines, cells ``val (train)``), a flat CSV with one row per run,
and a timing breakdown with text bars and the speedup of each transfer run
over the ``global-cnn`` baseline.

CSV columns, in order: ``pipeline, dataset_id, model, width, grid, delta,
seed, val_accuracy, train_accuracy, val_loss, train_loss`` followed by the
phase times ``time_local_max, time_local_sum, time_local_wall,
time_transfer, time_global, time_head, time_total`` in seconds (empty when a
pipeline has no such phase).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, FormatError
from .pipelines import PIPELINES, RunReport

META_COLUMNS = ("pipeline", "dataset_id", "model", "width", "grid", "delta", "seed")
METRIC_COLUMNS = ("val_accuracy", "train_accuracy", "val_loss", "train_loss")
TIME_PHASES = ("local_max", "local_sum", "local_wall", "transfer", "global", "head", "total")
CSV_COLUMNS = META_COLUMNS + METRIC_COLUMNS + tuple(f"time_{p}" for p in TIME_PHASES)
BAR_WIDTH = 40


@dataclass
class Comparison:
    table: str
    csv: str
    timing: str

    def text(self) -> str:
        return self.table + "\n\n" + self.timing + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(self.text())
        (out / "comparison.csv").write_text(self.csv)


def to_row(summary: dict) -> dict:
    """Flatten one summary record into a CSV row."""
    row = {k: summary.get(k) for k in META_COLUMNS}
    row.update({k: summary["final"][k] for k in METRIC_COLUMNS})
    for p in TIME_PHASES:
        row[f"time_{p}"] = summary["timings"].get(p)
    return row


def _parse_cell(name, text):
    if text == "":
        return None
    if name in ("width", "delta", "seed"):
        return int(text)
    if name in ("pipeline", "dataset_id", "model", "grid"):
        return text
    return float(text)


def read_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ContractError(f"unexpected CSV columns {reader.fieldnames}")
    return [{k: _parse_cell(k, v) for k, v in rec.items()} for rec in reader]


def write_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else
                         (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def load_reports(paths) -> list[dict]:
    """CSV rows from run directories, ``report.jsonl`` files or comparison CSVs."""
    rows = []
    for p in map(Path, paths):
        if p.is_dir():
            p = p / "report.jsonl"
        if not p.exists():
            raise ContractError(f"no report found at {p}")
        if p.suffix == ".csv":
            rows.extend(read_csv(p.read_text()))
            continue
        summary = None
        for line in p.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec.get("type") == "summary":
                    summary = rec
        if summary is None:
            raise FormatError(f"{p} has no summary record", p.stat().st_size)
        rows.append(to_row(summary))
    return rows


def _as_rows(reports) -> list[dict]:
    out = []
    for r in reports:
        if isinstance(r, RunReport):
            out.append(to_row(r.summary()))
        elif "final" in r:
            out.append(to_row(r))
        else:
            out.append(dict(r))
    return out


def accuracy_table(rows: list[dict]) -> str:
    keys = []
    cells = {}
    for row in rows:
        key = (row["grid"], row["delta"])
        if key not in keys:
            keys.append(key)
        if (key, row["pipeline"]) in cells:
            raise ContractError(f"two {row['pipeline']} runs for grid {row['grid']}, delta {row['delta']}")
        cells[key, row["pipeline"]] = f"{row['val_accuracy']:.4f} ({row['train_accuracy']:.4f})"
    header = ["decomposition", *PIPELINES]
    body = [[f"{g} d={d}", *(cells.get(((g, d), p), "-") for p in PIPELINES)] for g, d in keys]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def fmt(r):
        return " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()

    models = sorted({f"{r['model']} w={r['width']}" for r in rows
                     if r["pipeline"] not in ("global-lda", "lda-dnn")})
    lines = ["accuracy: validation (training)"]
    if models:
        lines.append("networks: " + ", ".join(models))
    lines += [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines)


def _train_time(row) -> float:
    """Training time of a run: parallel local phase (max) plus the following phase."""
    parts = [row.get(f"time_{p}") for p in ("local_max", "transfer", "global", "head")]
    return float(sum(p for p in parts if p is not None))


def timing_breakdown(rows: list[dict]) -> str:
    longest = max(_train_time(r) for r in rows) or 1.0
    base = [r for r in rows if r["pipeline"] == "global-cnn"]
    lines = ["training time (s): local phase = max over tiles [sum over tiles]"]
    for r in rows:
        t = _train_time(r)
        local = r.get("time_local_max") or 0.0
        nl = round(BAR_WIDTH * local / longest)
        bar = "L" * nl + "#" * max(round(BAR_WIDTH * t / longest) - nl, 0)
        parts = []
        if r.get("time_local_max") is not None:
            parts.append(f"local {r['time_local_max']:.3f} [{r['time_local_sum']:.3f}]")
        for p in ("transfer", "global", "head"):
            if r.get(f"time_{p}") is not None:
                parts.append(f"{p} {r[f'time_{p}']:.3f}")
        label = f"{r['pipeline']} {r['grid']}"
        lines.append(f"{label:<28} {bar:<{BAR_WIDTH}} {t:8.3f}  ({', '.join(parts)})")
    if base:
        b = _train_time(base[0])
        for r in rows:
            if r["pipeline"] in ("cnn-dnn-transfer", "dd-cnn-transfer") and _train_time(r) > 0:
                lines.append(f"speedup {r['pipeline']} {r['grid']} vs global-cnn: "
                             f"{b / _train_time(r):.2f}x")
    return "\n".join(lines)


def write_report(reports, out_dir=None) -> Comparison:
    """Merge run reports into a comparison; all runs must share one dataset."""
    rows = _as_rows(reports)
    if not rows:
        raise ContractError("write_report needs at least one report")
    ids = {r["dataset_id"] for r in rows}
    if len(ids) > 1:
        raise ContractError(f"reports come from different datasets: {sorted(ids)}")
    comp = Comparison(accuracy_table(rows), write_csv(rows), timing_breakdown(rows))
    if out_dir is not None:
        comp.write(out_dir)
    return comp
