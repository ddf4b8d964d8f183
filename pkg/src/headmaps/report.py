"""Byte-stable report writers: JSON documents, CSV tables and an SVG category heatmap."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import DataError
from .model_io import HeadRef
from .sweep import (
    CategoryGrid,
    RelationInfo,
    ScoreDistribution,
    SummaryStats,
    SweepResult,
    _score_from_dict,
    _score_to_dict,
)

FORMAT_TAG = "headmaps.sweep/1"

CATEGORY_COLORS = {
    "algorithmic": "#4e79a7",
    "knowledge": "#f28e2b",
    "linguistic": "#59a14f",
    "translation": "#e15759",
    "custom": "#b07aa1",
}
MULTI_COLOR = "#7f3c8d"
EMPTY_COLOR = "#f2f2f2"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def result_to_dict(result: SweepResult) -> dict:
    return {
        "format": FORMAT_TAG,
        "n_layers": result.n_layers,
        "n_heads": result.n_heads,
        "tau": result.tau,
        "heads": [str(h) for h in result.heads],
        "relations": [
            {"name": r.name, "category": r.category, "n_pairs": r.n_pairs, "k": r.k, "directions": list(r.directions)}
            for r in result.relations
        ],
        "scores": [_score_to_dict(s) for s in result.scores],
        "metadata": result.metadata,
    }


def result_from_dict(data: dict) -> SweepResult:
    if data.get("format") != FORMAT_TAG:
        raise DataError(f"not a sweep report (format tag {data.get('format')!r})")
    return SweepResult(
        n_layers=data["n_layers"],
        n_heads=data["n_heads"],
        heads=tuple(HeadRef.parse(h) for h in data["heads"]),
        relations=tuple(
            RelationInfo(r["name"], r["category"], r["n_pairs"], r["k"], tuple(r["directions"]))
            for r in data["relations"]
        ),
        scores=tuple(_score_from_dict(s) for s in data["scores"]),
        tau=data["tau"],
        metadata=data.get("metadata", {}),
    )


def write_result(result: SweepResult, path, descriptions: dict | None = None) -> Path:
    """Write a sweep report; ``descriptions`` maps head strings to description records."""
    doc = result_to_dict(result)
    if descriptions:
        doc["descriptions"] = {k: descriptions[k] for k in sorted(descriptions)}
    path = Path(path)
    path.write_text(_dumps(doc), encoding="utf-8")
    return path


def read_result(path) -> SweepResult:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return result_from_dict(data)


def append_descriptions(path, records: dict) -> Path:
    """Merge per-head description records into an existing report document."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    merged = dict(doc.get("descriptions") or {})
    merged.update(records)
    doc["descriptions"] = {k: merged[k] for k in sorted(merged)}
    path.write_text(_dumps(doc), encoding="utf-8")
    return path


def _write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def scores_csv(result: SweepResult, path) -> Path:
    rows = [
        [s.head.layer, s.head.head, s.relation, s.direction, repr(s.score), s.k, s.hits, s.n_pairs, int(s.classified)]
        for s in result.scores
    ]
    return _write_csv(path, ["layer", "head", "relation", "direction", "score", "k", "hits", "n_pairs", "classified"], rows)


def counts_csv(counts: dict, path) -> Path:
    return _write_csv(path, ["relation", "heads"], [[k, v] for k, v in counts.items()])


def grid_csv(grid: CategoryGrid, path) -> Path:
    rows = [
        [l, h, ";".join(sorted(grid.categories(l, h)))]
        for l in range(grid.n_layers)
        for h in range(grid.n_heads)
    ]
    return _write_csv(path, ["layer", "head", "categories"], rows)


def distribution_csv(dist: ScoreDistribution, path) -> Path:
    rows = [[f"{lo:.2f}", f"{hi:.2f}", int(c)] for lo, hi, c in zip(dist.edges[:-1], dist.edges[1:], dist.counts)]
    return _write_csv(path, ["bin_start", "bin_end", "heads"], rows)


def grid_svg(grid: CategoryGrid, path, cell: int = 12, title: str = "") -> Path:
    """Layer x head heatmap: one ``rect.cell`` per head, colored by its category set."""
    left, top = 40, 30 if title else 16
    legend_h = 18 * (len(CATEGORY_COLORS) + 1) + 8
    width = left + grid.n_heads * cell + 140
    height = top + grid.n_layers * cell + 24
    height = max(height, top + legend_h)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9">'
    ]
    if title:
        out.append(f'<text x="{left}" y="12" font-size="11">{escape(title)}</text>')
    for l in range(grid.n_layers):
        y = top + l * cell
        if l % 5 == 0:
            out.append(f'<text x="{left - 4}" y="{y + cell - 3}" text-anchor="end">{l}</text>')
        for h in range(grid.n_heads):
            cats = grid.categories(l, h)
            if not cats:
                color = EMPTY_COLOR
            elif len(cats) == 1:
                color = CATEGORY_COLORS.get(next(iter(cats)), CATEGORY_COLORS["custom"])
            else:
                color = MULTI_COLOR
            label = ", ".join(sorted(cats)) or "none"
            out.append(
                f'<rect class="cell" data-layer="{l}" data-head="{h}" x="{left + h * cell}" y="{y}" '
                f'width="{cell - 1}" height="{cell - 1}" fill="{color}"><title>{l}.{h}: {escape(label)}</title></rect>'
            )
    for h in range(0, grid.n_heads, 5):
        out.append(f'<text x="{left + h * cell + cell / 2}" y="{top + grid.n_layers * cell + 12}" text-anchor="middle">{h}</text>')
    lx = left + grid.n_heads * cell + 14
    items = list(CATEGORY_COLORS.items()) + [("multiple", MULTI_COLOR)]
    for i, (name, color) in enumerate(items):
        y = top + 18 * i
        out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{y + 9}">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


def stats_json(stats: SummaryStats, path) -> Path:
    d = asdict(stats)
    d["per_layer_classified_counts"] = list(stats.per_layer_classified_counts)
    path = Path(path)
    path.write_text(_dumps(d), encoding="utf-8")
    return path


def export_report(obj, fmt: str, path) -> Path:
    """Write ``obj`` (a sweep result, grid, stats, distribution or count table) as ``fmt``."""
    writers = {
        (SweepResult, "json"): write_result,
        (SweepResult, "csv"): scores_csv,
        (CategoryGrid, "svg"): grid_svg,
        (CategoryGrid, "csv"): grid_csv,
        (SummaryStats, "json"): stats_json,
        (ScoreDistribution, "csv"): distribution_csv,
        (dict, "csv"): counts_csv,
    }
    for (kind, f), writer in writers.items():
        if isinstance(obj, kind) and f == fmt:
            return writer(obj, path)
    if isinstance(obj, dict) and fmt == "json":
        p = Path(path)
        p.write_text(_dumps(obj), encoding="utf-8")
        return p
    raise ValueError(f"cannot export {type(obj).__name__} as {fmt!r}")
