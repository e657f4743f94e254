"""Evaluation reports: typed cells plus csv/json/markdown/svg emission.

A report is a flat list of cells, one per (model, N, K, domain, NOTA rate)
measurement, with report-level metadata carrying provenance shared by every
cell (config hash, code version, dispersion semantics).  csv and json are
lossless round-trip formats; markdown renders the familiar results grid with
"mean±disp" cells; svg draws accuracy-versus-NOTA-rate lines per model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

__all__ = [
    "ReportError",
    "EvalCell",
    "EvalReport",
    "to_csv",
    "parse_csv",
    "to_json",
    "parse_json",
    "to_markdown",
    "to_svg",
    "emit_report",
    "read_report",
]

CSV_COLUMNS = ("model", "n_way", "k_shot", "domain", "nota_rate",
               "acc_mean", "acc_std", "episodes", "repeats", "seed")


class ReportError(ValueError):
    """Raised for malformed report data or files."""


@dataclass(frozen=True)
class EvalCell:
    """One measured accuracy cell with enough provenance to re-run it."""

    model: str
    n_way: int
    k_shot: int
    domain: str
    nota_rate: float
    acc_mean: float
    acc_std: float
    episodes: int
    repeats: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.acc_mean <= 100.0:
            raise ReportError(f"acc_mean out of [0, 100]: {self.acc_mean}")
        if self.acc_std < 0.0:
            raise ReportError(f"acc_std must be >= 0, got {self.acc_std}")
        if not 0.0 <= self.nota_rate <= 1.0:
            raise ReportError(f"nota_rate out of [0, 1]: {self.nota_rate}")

    @property
    def pretty(self) -> str:
        return f"{self.acc_mean:.2f}±{self.acc_std:.2f}"


@dataclass(frozen=True)
class EvalReport:
    cells: tuple[EvalCell, ...]
    meta: Mapping[str, str]

    def __post_init__(self):
        if not self.cells:
            raise ReportError("report has no cells")
        for key, value in self.meta.items():
            if "\n" in key or "\n" in str(value) or "=" in key:
                raise ReportError(f"meta entry {key!r} cannot round-trip")

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.cells == other.cells and dict(self.meta) == dict(other.meta)


def make_report(cells: Iterable[EvalCell], meta: Mapping[str, str]) -> EvalReport:
    return EvalReport(tuple(cells), dict(meta))


# ---------------------------------------------------------------------------
# csv (lossless: floats via repr, meta as leading comment lines)
# ---------------------------------------------------------------------------

def to_csv(report: EvalReport) -> str:
    lines = [f"# {k}={report.meta[k]}" for k in sorted(report.meta)]
    lines.append(",".join(CSV_COLUMNS))
    for c in report.cells:
        d = asdict(c)
        row = []
        for col in CSV_COLUMNS:
            v = d[col]
            if isinstance(v, float):
                row.append(repr(v))
            else:
                v = str(v)
                if any(ch in v for ch in ",\n\"#"):
                    raise ReportError(f"cell field {col}={v!r} cannot round-trip")
                row.append(v)
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> EvalReport:
    meta: dict[str, str] = {}
    rows: list[EvalCell] = []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            key, sep, value = body.partition("=")
            if not sep:
                raise ReportError(f"line {lineno}: malformed meta comment")
            meta[key.strip()] = value
            continue
        parts = line.split(",")
        if not header_seen:
            if tuple(parts) != CSV_COLUMNS:
                raise ReportError(f"line {lineno}: bad header {parts}")
            header_seen = True
            continue
        if len(parts) != len(CSV_COLUMNS):
            raise ReportError(f"line {lineno}: expected {len(CSV_COLUMNS)} "
                              f"fields, got {len(parts)}")
        vals = dict(zip(CSV_COLUMNS, parts))
        try:
            rows.append(EvalCell(
                model=vals["model"],
                n_way=int(vals["n_way"]),
                k_shot=int(vals["k_shot"]),
                domain=vals["domain"],
                nota_rate=float(vals["nota_rate"]),
                acc_mean=float(vals["acc_mean"]),
                acc_std=float(vals["acc_std"]),
                episodes=int(vals["episodes"]),
                repeats=int(vals["repeats"]),
                seed=int(vals["seed"]),
            ))
        except ValueError as exc:
            raise ReportError(f"line {lineno}: {exc}") from exc
    if not header_seen:
        raise ReportError("csv report has no header line")
    return EvalReport(tuple(rows), meta)


# ---------------------------------------------------------------------------
# json
# ---------------------------------------------------------------------------

def to_json(report: EvalReport) -> str:
    payload = {"meta": dict(sorted(report.meta.items())),
               "cells": [asdict(c) for c in report.cells]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def parse_json(text: str) -> EvalReport:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"cannot parse json report: {exc}") from exc
    if not isinstance(payload, dict) or "cells" not in payload:
        raise ReportError("json report must be an object with a 'cells' list")
    try:
        cells = tuple(EvalCell(**c) for c in payload["cells"])
    except TypeError as exc:
        raise ReportError(f"bad cell fields: {exc}") from exc
    meta = {str(k): str(v) for k, v in payload.get("meta", {}).items()}
    return EvalReport(cells, meta)


# ---------------------------------------------------------------------------
# markdown grid: one row per (model, domain, N, K), one column per NOTA rate
# ---------------------------------------------------------------------------

def _rate_label(rate: float) -> str:
    return f"{rate * 100:g}% NOTA"


def to_markdown(report: EvalReport) -> str:
    rates = sorted({c.nota_rate for c in report.cells})
    rows: dict[tuple[str, str, int, int], dict[float, EvalCell]] = {}
    for c in report.cells:
        key = (c.model, c.domain, c.n_way, c.k_shot)
        slot = rows.setdefault(key, {})
        if c.nota_rate in slot:
            raise ReportError(f"duplicate cell for {key} at rate {c.nota_rate}")
        slot[c.nota_rate] = c

    header = ["model", "domain", "task"] + [_rate_label(r) for r in rates]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for (model, domain, n, k), slot in rows.items():
        cells = [slot[r].pretty if r in slot else "-" for r in rates]
        lines.append("| " + " | ".join([model, domain, f"{n}-way {k}-shot",
                                        *cells]) + " |")
    footer = ("\n± is the standard deviation of mean accuracy across "
              "independent seeded repeats (column `repeats` in the csv form); "
              "means are over `episodes` evaluation episodes.")
    prov = "; ".join(f"{k}={v}" for k, v in sorted(report.meta.items()))
    if prov:
        footer += f"\nProvenance: {prov}."
    return "\n".join(lines) + "\n" + footer + "\n"


# ---------------------------------------------------------------------------
# svg: accuracy-vs-NOTA-rate polyline per (model, domain) series
# ---------------------------------------------------------------------------

_PALETTE = ("#4062bb", "#e4572e", "#2e933c", "#8b5fbf", "#c98a00", "#3a7ca5")


def to_svg(report: EvalReport, width: int = 640, height: int = 400) -> str:
    series: dict[tuple[str, str], list[EvalCell]] = {}
    for c in report.cells:
        series.setdefault((c.model, c.domain), []).append(c)
    for cells in series.values():
        cells.sort(key=lambda c: c.nota_rate)

    left, right, top, bottom = 60, 20, 20, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    max_rate = max((c.nota_rate for c in report.cells), default=0.0) or 1.0

    def x_of(rate: float) -> float:
        return left + plot_w * (rate / max_rate)

    def y_of(acc: float) -> float:
        return top + plot_h * (1.0 - acc / 100.0)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" '
             f'stroke="black"/>',
             f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
             f'y2="{top + plot_h}" stroke="black"/>']
    for acc in (0, 25, 50, 75, 100):
        y = y_of(acc)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{acc}</text>')
    for rate in sorted({c.nota_rate for c in report.cells}):
        x = x_of(rate)
        parts.append(f'<line x1="{x:.1f}" y1="{top + plot_h}" x2="{x:.1f}" '
                     f'y2="{top + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + plot_h + 18}" '
                     f'font-size="11" text-anchor="middle">'
                     f'{rate * 100:g}%</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 8}" '
                 f'font-size="12" text-anchor="middle">NOTA rate</text>')

    for i, ((model, domain), cells) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{x_of(c.nota_rate):.1f},{y_of(c.acc_mean):.1f}"
                       for c in cells)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="2" points="{pts}"/>')
        for c in cells:
            parts.append(f'<circle cx="{x_of(c.nota_rate):.1f}" '
                         f'cy="{y_of(c.acc_mean):.1f}" r="3" fill="{color}"/>')
        label = model if domain == "in-domain" else f"{model} ({domain})"
        ly = top + 16 + 16 * i
        parts.append(f'<rect x="{left + 10}" y="{ly - 9}" width="12" '
                     f'height="4" fill="{color}"/>')
        parts.append(f'<text x="{left + 28}" y="{ly}" font-size="11">'
                     f'{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# file-level entry points
# ---------------------------------------------------------------------------

_WRITERS = {"csv": to_csv, "json": to_json, "markdown": to_markdown,
            "svg": to_svg}
_SUFFIX = {"csv": ".csv", "json": ".json", "markdown": ".md", "svg": ".svg"}


def emit_report(report: EvalReport, fmt: str, path) -> Path:
    """Write the report in the requested format; returns the path written."""
    if fmt not in _WRITERS:
        raise ReportError(f"unknown report format {fmt!r}; "
                          f"pick from {sorted(_WRITERS)}")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_WRITERS[fmt](report), encoding="utf-8")
    return out


def read_report(path) -> EvalReport:
    """Load a csv or json report file (decided by suffix)."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        return parse_json(text)
    if p.suffix == ".csv":
        return parse_csv(text)
    raise ReportError(f"cannot infer report format from suffix {p.suffix!r}")
