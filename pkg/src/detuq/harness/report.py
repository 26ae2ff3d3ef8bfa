"""Report rows, CSV emission and SVG line charts."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

METRIC_FIELDS = ("accuracy", "mean_uncertainty", "auroc", "aupr", "ece", "brier", "aulc", "raulc", "runtime_ms")
CHART_METRICS = ("accuracy", "mean_uncertainty", "auroc", "ece", "brier", "raulc")


@dataclass
class ReportRow:
    method: str
    strength: float
    seed: int | str
    severity: int | str
    status: str = "ok"
    accuracy: float | None = None
    mean_uncertainty: float | None = None
    auroc: float | None = None
    aupr: float | None = None
    ece: float | None = None
    brier: float | None = None
    aulc: float | None = None
    raulc: float | None = None
    runtime_ms: float | None = None
    note: str = ""


REPORT_FIELDS = tuple(f.name for f in fields(ReportRow))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, text: str):
    if name in METRIC_FIELDS:
        return float(text) if text else None
    if name == "strength":
        return float(text)
    if name in ("seed", "severity"):
        try:
            return int(text)
        except ValueError:
            return text
    return text


def write_report_csv(rows: Sequence[ReportRow], path: str | Path) -> None:
    if not rows:
        raise ValueError("no report rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for row in rows:
            d = asdict(row)
            w.writerow([_cell(d[f]) for f in REPORT_FIELDS])


def read_report_csv(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected report header")
        return [ReportRow(**{k: _parse(k, v) for k, v in r.items()}) for r in reader]


def mean_rows(rows: Sequence[ReportRow]) -> list[ReportRow]:
    """Average successful seeds per (method, strength, severity); failures are footnoted."""
    groups: dict[tuple, list[ReportRow]] = defaultdict(list)
    failed: dict[tuple, set] = defaultdict(set)
    order: list[tuple] = []
    for r in rows:
        if r.seed == "mean":
            continue
        key = (r.method, r.strength, r.severity)
        if key not in groups and key not in failed:
            order.append(key)
        if r.status == "ok":
            groups[key].append(r)
        else:
            failed[(r.method, r.strength)].add(r.seed)
    out = []
    for key in order:
        members = groups.get(key, [])
        bad = sorted(failed.get(key[:2], set()), key=str)
        note = f"excluded failed seeds: {' '.join(map(str, bad))}" if bad else ""
        row = ReportRow(key[0], key[1], "mean", key[2], "ok" if members else "failed", note=note)
        for m in METRIC_FIELDS:
            vals = [getattr(r, m) for r in members if getattr(r, m) is not None]
            setattr(row, m, math.fsum(vals) / len(vals) if vals else None)
        out.append(row)
    return out


# --- SVG ---------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#7f7f7f")
_W, _H, _L, _R, _T, _B = 640, 400, 70, 170, 30, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_range(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def render_chart(series: dict[str, list[tuple[float, float]]], metric: str, x_label: str = "severity") -> str:
    """Deterministic SVG line chart; ``series`` maps a label to ``(x, y)`` points."""
    if not series or not any(series.values()):
        raise ValueError("nothing to plot")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = (min(xs), max(xs)) if min(xs) != max(xs) else (min(xs) - 1, max(xs) + 1)
    y0, y1 = _nice_range(ys)
    pw, ph = _W - _L - _R, _H - _T - _B

    def px(x):
        return _L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return _T + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.2f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(metric)}</text>',
        f'<line x1="{_L}" y1="{_T + ph}" x2="{_L + pw}" y2="{_T + ph}" stroke="black"/>',
        f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_T + ph}" stroke="black"/>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(
            f'<text x="{_L - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.3g}</text>'
        )
    for xv in sorted(set(xs)):
        out.append(
            f'<text x="{_fmt(px(xv))}" y="{_T + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:g}</text>'
        )
    out.append(
        f'<text x="{_L + pw / 2:.2f}" y="{_H - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(x_label)}</text>'
    )
    for i, (label, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts)
        path = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in pts)
        if len(pts) > 1:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
        ly = _T + 14 + 18 * i
        out.append(f'<rect x="{_L + pw + 14}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        out.append(
            f'<text x="{_L + pw + 32}" y="{ly + 1}" font-family="sans-serif" font-size="11">{escape(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(rows: Sequence[ReportRow], out_dir: str | Path, formats: Sequence[str] = ("csv", "svg")) -> list[Path]:
    """Write ``report.csv`` and/or one ``charts/<metric>.svg`` per metric."""
    if not rows:
        raise ValueError("no report rows")
    unknown = set(formats) - {"csv", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        write_report_csv(rows, out_dir / "report.csv")
        written.append(out_dir / "report.csv")
    if "svg" in formats:
        charts = out_dir / "charts"
        charts.mkdir(exist_ok=True)
        means = [r for r in rows if r.seed == "mean"] or mean_rows(rows)
        for metric in CHART_METRICS:
            series: dict[str, list[tuple[float, float]]] = {}
            for r in means:
                v = getattr(r, metric)
                if v is None or not isinstance(r.severity, int):
                    continue
                label = r.method if r.strength == 0 else f"{r.method} ({r.strength:g})"
                series.setdefault(label, []).append((float(r.severity), v))
            if series:
                path = charts / f"{metric}.svg"
                path.write_text(render_chart(series, metric))
                written.append(path)
    return written
