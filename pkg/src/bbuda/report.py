"""Comparison table over evaluation reports: source-only, BBUDA-Ent, BBUDA.

The JSON form is canonical. The text form carries every value at full
precision, so :func:`parse_text` recovers the JSON exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

METHOD_ORDER = ("source-only", "BBUDA-Ent", "BBUDA")
REGION_ORDER = ("whole", "enhancing", "core")
METRICS = ("dice", "hd")
BASELINE = "source-only"


class ReportError(ValueError):
    pass


def load_eval(path) -> dict:
    """Read an ``evaluate`` output (file, or a directory holding ``eval.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "eval.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"evaluation report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from None
    if "method" not in data or "regions" not in data:
        raise ReportError(f"{path}: missing 'method' or 'regions'")
    return data


def _cell(region_stats: dict, metric: str) -> Optional[float]:
    value = region_stats.get(f"{metric}_mean")
    return None if value is None else float(value)


def _columns() -> List[str]:
    return [f"{r}.{m}" for r in REGION_ORDER for m in METRICS]


def build(evals: Sequence[dict]) -> dict:
    if len(evals) < 2:
        raise ReportError("a comparison needs at least two evaluation reports")
    by_method: Dict[str, dict] = {}
    for ev in evals:
        method = ev["method"]
        if method not in METHOD_ORDER:
            raise ReportError(f"unknown method {method!r}; expected one of {METHOD_ORDER}")
        if method in by_method:
            raise ReportError(f"two reports for method {method!r}")
        by_method[method] = ev
    rows = []
    for method in METHOD_ORDER:
        if method in by_method:
            regions = by_method[method]["regions"]
            rows.append({"method": method,
                         "values": {c: _cell(regions.get(c.split(".")[0], {}), c.split(".")[1])
                                    for c in _columns()}})
    return _annotate(rows)


def _annotate(rows: List[dict]) -> dict:
    """Add per-column best markers and deltas against the source-only row."""
    best: Dict[str, Optional[str]] = {}
    for col in _columns():
        higher_better = col.endswith(".dice")
        vals = [(r["values"][col], r["method"]) for r in rows if r["values"][col] is not None]
        if not vals:
            best[col] = None
            continue
        top = max(v for v, _ in vals) if higher_better else min(v for v, _ in vals)
        winners = [m for v, m in vals if v == top]
        # ties are not flagged: nothing is better than anything else
        best[col] = winners[0] if len(winners) == 1 else None
    base = next((r for r in rows if r["method"] == BASELINE), None)
    deltas: Dict[str, Dict[str, Optional[float]]] = {}
    if base is not None:
        for r in rows:
            if r is base:
                continue
            deltas[r["method"]] = {
                col: (None if r["values"][col] is None or base["values"][col] is None
                      else r["values"][col] - base["values"][col])
                for col in _columns()}
    return {"columns": _columns(), "rows": rows, "best": best, "deltas": deltas}


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else repr(float(v))


def _unfmt(s: str) -> Optional[float]:
    s = s.rstrip("*")
    return None if s == "-" else float(s)


def render_text(report: dict) -> str:
    cols = report["columns"]
    header = ["method"] + cols
    body = []
    for r in report["rows"]:
        cells = [r["method"]]
        for c in cols:
            mark = "*" if report["best"].get(c) == r["method"] else ""
            cells.append(_fmt(r["values"][c]) + mark)
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in [header] + body]
    lines.append("")
    lines.append("* best in column (Dice: highest, HD: lowest); deltas vs source-only:")
    for method, d in report["deltas"].items():
        changed = sum(1 for v in d.values() if v)
        lines.append(f"  {method}: {changed} nonzero delta(s); whole.dice {_signed(d.get('whole.dice'))}")
    return "\n".join(lines) + "\n"


def _signed(v: Optional[float]) -> str:
    return "n/a" if v is None or math.isnan(v) else f"{v:+.4f}"


def parse_text(text: str) -> dict:
    """Recover the JSON report from :func:`render_text` output."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("method"):
        raise ReportError("not a report table")
    cols = lines[0].split()[1:]
    if cols != _columns():
        raise ReportError(f"unexpected columns {cols}")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            break
        parts = line.split()
        rows.append({"method": parts[0], "values": {c: _unfmt(v) for c, v in zip(cols, parts[1:])}})
    return _annotate(rows)


def write(report: dict, out_dir) -> tuple:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, text_path = out_dir / "report.json", out_dir / "report.txt"
    json_path.write_text(json.dumps(report, indent=2) + "\n")
    text_path.write_text(render_text(report))
    return json_path, text_path
