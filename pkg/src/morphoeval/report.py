"""Benchmark reports: long-format CSV, nested JSON and per-metric SVG heatmaps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from morphoeval.retrieval import ALL_LEVELS

CSV_COLUMNS = ["method", "task", "dataset", "level", "metric", "value", "n_queries", "skipped", "chance_baseline"]
NA = "NA"
_LEVEL_ORDER = {lv.value: i for i, lv in enumerate(ALL_LEVELS)}


@dataclass(frozen=True)
class ReportRow:
    method: str
    task: str
    dataset: str
    level: str
    metric: str
    value: float | None
    n_queries: int | None = None
    skipped: int | None = None
    chance_baseline: float | None = None
    reason: str = ""

    @property
    def applicable(self) -> bool:
        return self.value is not None

    def sort_key(self):
        return (self.method, self.task, _LEVEL_ORDER.get(self.level, 99), self.level, self.metric)


@dataclass
class BenchmarkReport:
    rows: list[ReportRow] = field(default_factory=list)
    run: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[ReportRow]:
        return sorted(self.rows, key=ReportRow.sort_key)

    def value(self, method: str, task: str, level: str, metric: str) -> float | None:
        for r in self.rows:
            if (r.method, r.task, r.level, r.metric) == (method, task, level, metric):
                return r.value
        raise KeyError((method, task, level, metric))

    def to_nested(self) -> dict:
        nested: dict = {}
        for r in self.sorted_rows():
            cell: dict = {
                "dataset": r.dataset,
                "value": r.value,
                "n_queries": r.n_queries,
                "skipped": r.skipped,
                "chance_baseline": r.chance_baseline,
            }
            if not r.applicable:
                cell["status"] = "not_applicable"
                cell["reason"] = r.reason
            nested.setdefault(r.method, {}).setdefault(r.task, {}).setdefault(r.level, {})[r.metric] = cell
        return {"run": self.run, "results": nested}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else NA
    return str(x)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def write_csv(report: BenchmarkReport, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.sorted_rows():
        writer.writerow([
            r.method, r.task, r.dataset, r.level, r.metric,
            _fmt(r.value) if r.applicable else NA,
            _fmt(r.n_queries), _fmt(r.skipped), _fmt(r.chance_baseline),
        ])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# SVG heatmaps
# ---------------------------------------------------------------------------

_RAMP = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#%02x%02x%02x" % tuple(rgb)


def heatmap_svg(title: str, methods: list[str], levels: list[str], values: dict[tuple[str, str], float | None]) -> str:
    """Methods as rows, stringency levels as columns, values printed in cells."""
    cell_w, cell_h, left, top = 90, 34, 170, 56
    width = left + cell_w * len(levels) + 20
    height = top + cell_h * len(methods) + 20
    finite = [v for v in values.values() if v is not None and math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif">',
        f'<text x="{left}" y="22" font-size="14" font-weight="bold">{escape(title)}</text>',
    ]
    for j, level in enumerate(levels):
        x = left + j * cell_w + cell_w / 2
        out.append(f'<text x="{x:g}" y="{top - 8}" font-size="12" text-anchor="middle">{escape(level)}</text>')
    for i, method in enumerate(methods):
        y = top + i * cell_h
        out.append(
            f'<text x="{left - 8}" y="{y + cell_h / 2 + 4:g}" font-size="12" text-anchor="end">{escape(method)}</text>'
        )
        for j, level in enumerate(levels):
            x = left + j * cell_w
            v = values.get((method, level))
            if v is None or not math.isfinite(v):
                fill, label, ink = "#d9d9d9", NA, "#000000"
            else:
                t = (v - lo) / span
                fill, label = _color(t), f"{v:.3g}"
                ink = "#000000" if t > 0.55 else "#ffffff"
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" stroke="#ffffff"/>'
            )
            out.append(
                f'<text x="{x + cell_w / 2:g}" y="{y + cell_h / 2 + 4:g}" font-size="12" '
                f'text-anchor="middle" fill="{ink}">{escape(label)}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _safe_name(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def write_heatmaps(report: BenchmarkReport, directory: Path) -> list[Path]:
    rows = report.sorted_rows()
    paths = []
    for task, metric in sorted({(r.task, r.metric) for r in rows}):
        sub = [r for r in rows if r.task == task and r.metric == metric]
        methods = sorted({r.method for r in sub})
        levels = sorted({r.level for r in sub}, key=lambda lv: (_LEVEL_ORDER.get(lv, 99), lv))
        values = {(r.method, r.level): r.value for r in sub}
        path = directory / f"heatmap_{_safe_name(task)}_{_safe_name(metric)}.svg"
        path.write_text(heatmap_svg(f"{task}: {metric}", methods, levels, values), encoding="utf-8")
        paths.append(path)
    return paths


def emit_report(report: BenchmarkReport, directory: str | Path) -> list[Path]:
    """Write results.csv, results.json and one heatmap per (task, metric)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(report, directory / "results.csv")
    payload = json.dumps(_json_safe(report.to_nested()), indent=2, sort_keys=True)
    (directory / "results.json").write_text(payload + "\n", encoding="utf-8")
    return [directory / "results.csv", directory / "results.json", *write_heatmaps(report, directory)]


def report_from_csv(path: str | Path, run: dict | None = None) -> BenchmarkReport:
    def num(s: str, cast):
        return None if s in ("", NA) else cast(s)

    rows = [
        ReportRow(
            r["method"], r["task"], r["dataset"], r["level"], r["metric"],
            num(r["value"], float), num(r["n_queries"], int), num(r["skipped"], int),
            num(r["chance_baseline"], float),
        )
        for r in read_csv(path)
    ]
    return BenchmarkReport(rows, run or {})


def check_consistency(directory: str | Path) -> list[str]:
    """Mismatches between results.csv and results.json; empty when they agree."""
    directory = Path(directory)
    nested = json.loads((directory / "results.json").read_text(encoding="utf-8"))["results"]
    problems = []
    seen = 0
    for r in read_csv(directory / "results.csv"):
        seen += 1
        try:
            cell = nested[r["method"]][r["task"]][r["level"]][r["metric"]]
        except KeyError:
            problems.append(f"missing in JSON: {r}")
            continue
        csv_value = None if r["value"] == NA else float(r["value"])
        if csv_value != cell["value"]:
            problems.append(f"value mismatch for {r}: json={cell['value']}")
    n_json = sum(len(m) for t in nested.values() for lv in t.values() for m in lv.values())
    if n_json != seen:
        problems.append(f"row count differs: csv={seen} json={n_json}")
    return problems
