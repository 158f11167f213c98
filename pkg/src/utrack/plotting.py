"""Trajectory CSV reading and deterministic SVG rendering (no plotting library)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional
from xml.sax.saxutils import escape

from .env import TRAJ_COLUMNS


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class EntityTrack:
    entity_id: int
    kind: str
    xy: List[tuple] = field(default_factory=list)
    est: List[tuple] = field(default_factory=list)
    collisions: List[tuple] = field(default_factory=list)


def read_trajectory_csv(path) -> Dict[int, EntityTrack]:
    """Parse a trajectory CSV into per-entity tracks; errors name the line."""
    tracks: Dict[int, EntityTrack] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJ_COLUMNS:
            raise TrajectoryFormatError(f"{path}:1: expected header {','.join(TRAJ_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(TRAJ_COLUMNS):
                raise TrajectoryFormatError(f"{path}:{line}: expected {len(TRAJ_COLUMNS)} fields, got {len(row)}")
            rec = dict(zip(TRAJ_COLUMNS, row))
            try:
                eid = int(rec["entity_id"])
                x, y = float(rec["x"]), float(rec["y"])
                est = (float(rec["est_x"]), float(rec["est_y"])) if rec["est_x"] != "" else None
                coll = int(rec["collision"])
                int(rec["step"])
            except ValueError as exc:
                raise TrajectoryFormatError(f"{path}:{line}: {exc}") from None
            if rec["kind"] not in ("agent", "target"):
                raise TrajectoryFormatError(f"{path}:{line}: kind must be agent or target, got {rec['kind']!r}")
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TrajectoryFormatError(f"{path}:{line}: non-finite position")
            tr = tracks.setdefault(eid, EntityTrack(eid, rec["kind"]))
            tr.xy.append((x, y))
            if est is not None and all(math.isfinite(v) for v in est):
                tr.est.append(est)
            if coll and rec["kind"] == "agent":
                tr.collisions.append((x, y))
    return tracks


_AGENT_COLORS = ["#1f77b4", "#2ca02c", "#9467bd", "#17becf", "#bcbd22", "#8c564b"]
_TARGET_COLORS = ["#d62728", "#ff7f0e", "#e377c2", "#7f7f7f", "#6b4c9a", "#a05d56"]


def _nice_ticks(lo: float, hi: float, n: int = 5):
    span = hi - lo
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    t = math.ceil(lo / step) * step
    out = []
    while t <= hi + 1e-9 * span:
        out.append(round(t, 10))
        t += step
    return out


def render_svg(tracks: Dict[int, EntityTrack], title: str = "", width: int = 720, height: int = 560) -> str:
    """SVG with agent paths (solid), target paths (dashed), estimates (dotted)
    and collision markers.  Output depends only on the input."""
    pts = [p for t in tracks.values() for p in t.xy + t.est]
    if pts:
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    # equal aspect with a 5% pad
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    half = max(x1 - x0, y1 - y0, 1.0) * 0.55
    x0, x1, y0, y1 = cx - half, cx + half, cy - half, cy + half
    ml, mr, mt, mb = 70, 170, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    side = min(pw, ph)

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * side

    def sy(y):
        return mt + side - (y - y0) / (y1 - y0) * side

    def f(v):
        return f"{v:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{ml}" y="22" font-size="14">{escape(title)}</text>')
    out.append(f'<g class="axes"><rect x="{ml}" y="{mt}" width="{side}" height="{side}" fill="none" stroke="black"/>')
    for t in _nice_ticks(x0, x1):
        out.append(f'<line x1="{f(sx(t))}" y1="{mt + side}" x2="{f(sx(t))}" y2="{mt + side + 5}" stroke="black"/>'
                   f'<text x="{f(sx(t))}" y="{mt + side + 18}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{ml - 5}" y1="{f(sy(t))}" x2="{ml}" y2="{f(sy(t))}" stroke="black"/>'
                   f'<text x="{ml - 8}" y="{f(sy(t) + 4)}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{ml + side / 2:.2f}" y="{height - 10}" text-anchor="middle">x (m)</text>')
    out.append(f'<text x="18" y="{mt + side / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {mt + side / 2:.2f})">y (m)</text></g>')

    def poly(p, color, extra):
        if not p:
            return ""
        d = " ".join(f"{f(sx(x))},{f(sy(y))}" for x, y in p)
        return f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5" {extra}/>'

    legend = []
    na = nt = 0
    for eid in sorted(tracks):
        t = tracks[eid]
        if t.kind == "agent":
            color = _AGENT_COLORS[na % len(_AGENT_COLORS)]
            na += 1
            out.append(poly(t.xy, color, ""))
            if t.xy:
                x, y = t.xy[0]
                out.append(f'<circle cx="{f(sx(x))}" cy="{f(sy(y))}" r="3" fill="{color}"/>')
            for x, y in t.collisions:
                X, Y = sx(x), sy(y)
                out.append(f'<path class="collision" d="M{f(X - 4)},{f(Y - 4)}L{f(X + 4)},{f(Y + 4)}'
                           f'M{f(X - 4)},{f(Y + 4)}L{f(X + 4)},{f(Y - 4)}" stroke="red" stroke-width="2"/>')
            legend.append((color, f"agent {eid}", ""))
        else:
            color = _TARGET_COLORS[nt % len(_TARGET_COLORS)]
            nt += 1
            out.append(poly(t.xy, color, 'stroke-dasharray="6,3"'))
            out.append(poly(t.est, color, 'stroke-dasharray="1,3" opacity="0.8"'))
            legend.append((color, f"target {eid}", 'stroke-dasharray="6,3"'))
    lx = ml + side + 20
    for i, (color, label, dash) in enumerate(legend):
        y = mt + 10 + 18 * i
        out.append(f'<g class="legend-entity"><line x1="{lx}" y1="{y}" x2="{lx + 24}" y2="{y}" stroke="{color}" '
                   f'stroke-width="2" {dash}/><text x="{lx + 30}" y="{y + 4}">{escape(label)}</text></g>')
    y = mt + 10 + 18 * len(legend) + 10
    out.append(f'<g class="legend-style"><text x="{lx}" y="{y}">dotted: estimate</text>'
               f'<text x="{lx}" y="{y + 16}" fill="red">x: collision</text></g>')
    out.append("</svg>")
    return "\n".join(s for s in out if s) + "\n"


def plot_trajectories(csv_paths, out_path) -> List[Path]:
    """Render each CSV.  A single CSV with an ``.svg`` target writes that
    file; otherwise ``out_path`` is a directory receiving ``<stem>.svg``."""
    csv_paths = [Path(p) for p in csv_paths]
    out_path = Path(out_path)
    if len(csv_paths) == 1 and out_path.suffix == ".svg":
        targets = [out_path]
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        targets = [out_path / (p.stem + ".svg") for p in csv_paths]
    parsed = [read_trajectory_csv(p) for p in csv_paths]  # validate all before writing any
    for p, tracks, dst in zip(csv_paths, parsed, targets):
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_text(render_svg(tracks, title=p.stem))
    return targets
