"""Static artifacts: sharing maps (JSON and SVG) and accuracy/sparsity frontiers (CSV and SVG).

All writers are deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

from taps.errors import ConfigurationError

SHARED_COLOR = "#f2cf3b"
KIND_COLORS = {
    "conv": "#2b6cb0",
    "linear": "#2f855a",
    "qkv": "#b0243b",
    "projection": "#6b46c1",
    "mlp": "#dd6b20",
}
FRONTIER_FIELDS = ("lambda", "accuracy", "layer_pct", "param_pct")


@dataclass
class SharingMap:
    layers: list
    kinds: list
    tasks: list      # task ids, one row each
    rows: list       # one boolean list per task: True = task-specific

    def __post_init__(self):
        if len(self.layers) != len(self.kinds):
            raise ConfigurationError("every layer needs exactly one kind tag")
        unknown = sorted(set(self.kinds) - set(KIND_COLORS))
        if unknown:
            raise ConfigurationError(f"unknown layer kinds {unknown}")
        if len(self.tasks) != len(self.rows):
            raise ConfigurationError("one row per task is required")
        for tid, row in zip(self.tasks, self.rows):
            if len(row) != len(self.layers):
                raise ConfigurationError(f"task {tid!r}: {len(row)} entries for {len(self.layers)} layers")

    @classmethod
    def from_report(cls, report: dict) -> "SharingMap":
        return cls(list(report["layer_names"]), list(report["layer_kinds"]),
                   [t["task_id"] for t in report["tasks"]], [list(t["layer_map"]) for t in report["tasks"]])

    def to_dict(self) -> dict:
        return {"layers": self.layers, "kinds": self.kinds,
                "tasks": [{"task_id": t, "task_specific": r} for t, r in zip(self.tasks, self.rows)]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def sharing_map_svg(smap: SharingMap, cell=22, gap=2) -> str:
    """Grid with one row per task and one column per adaptive layer.

    Shared cells are yellow; task-specific cells take the colour of their
    layer kind. Every cell carries ``data-task``, ``data-layer``,
    ``data-kind`` and ``data-task-specific`` attributes.
    """
    label_w = 8 + 7 * max([len(str(t)) for t in smap.tasks] + [4])
    top = 8 + 7 * max([len(str(name)) for name in smap.layers] + [4])
    width = max(label_w + len(smap.layers) * (cell + gap) + 8, 200)
    height = top + len(smap.tasks) * (cell + gap) + 8 + 18 * len(KIND_COLORS) + 18
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for j, name in enumerate(smap.layers):
        x = label_w + j * (cell + gap) + cell // 2
        out.append(f'<text x="{x}" y="{top - 4}" transform="rotate(-90 {x} {top - 4})">{escape(str(name))}</text>')
    for i, (tid, row) in enumerate(zip(smap.tasks, smap.rows)):
        y = top + i * (cell + gap)
        out.append(f'<text x="4" y="{y + cell - 7}">{escape(str(tid))}</text>')
        for j, (name, kind, specific) in enumerate(zip(smap.layers, smap.kinds, row)):
            x = label_w + j * (cell + gap)
            fill = KIND_COLORS[kind] if specific else SHARED_COLOR
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" '
                f'data-task={quoteattr(str(tid))} data-layer={quoteattr(str(name))} data-kind="{kind}" '
                f'data-task-specific="{"true" if specific else "false"}"/>'
            )
    y = top + len(smap.tasks) * (cell + gap) + 14
    out.append(f'<rect x="4" y="{y - 10}" width="10" height="10" fill="{SHARED_COLOR}"/>')
    out.append(f'<text x="18" y="{y}">shared</text>')
    for k, (kind, color) in enumerate(KIND_COLORS.items(), 1):
        yy = y + 18 * k
        out.append(f'<rect x="4" y="{yy - 10}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="18" y="{yy}">{kind} (task-specific)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def frontier_csv(rows) -> str:
    """``lambda,accuracy,layer_pct,param_pct``; floats keep their full repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_FIELDS)
    for r in rows:
        writer.writerow([repr(float(r[k])) for k in FRONTIER_FIELDS])
    return buf.getvalue()


def read_frontier_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: float(v) for k, v in row.items()} for row in reader]


def frontier_svg(rows, width=420, height=300) -> str:
    """Scatter of accuracy against the percentage of task-specific layers, one labelled point per lambda."""
    rows = list(rows)
    if not rows:
        raise ConfigurationError("frontier has no points")
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    accs = [float(r["accuracy"]) for r in rows]
    lo, hi = min(accs), max(accs)
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return left + pw * float(v) / 100.0

    def sy(v):
        return top + ph * (1.0 - (float(v) - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#000"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="#000"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">% task-specific layers</text>',
        f'<text x="12" y="{top + ph / 2:.1f}" transform="rotate(-90 12 {top + ph / 2:.1f})" '
        f'text-anchor="middle">accuracy (%)</text>',
    ]
    for tick in (0, 25, 50, 75, 100):
        out.append(f'<text x="{sx(tick):.1f}" y="{top + ph + 14}" text-anchor="middle">{tick}</text>')
    for v in (lo + pad, hi - pad):
        out.append(f'<text x="{left - 4}" y="{sy(v):.1f}" text-anchor="end">{v:.1f}</text>')
    for r in rows:
        x, y = sx(r["layer_pct"]), sy(r["accuracy"])
        out.append(
            f'<circle class="point" cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#2b6cb0" '
            f'data-lambda="{float(r["lambda"])!r}" data-accuracy="{float(r["accuracy"])!r}" '
            f'data-layer-pct="{float(r["layer_pct"])!r}"/>'
        )
        out.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}">λ={float(r["lambda"]):g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
