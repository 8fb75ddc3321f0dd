"""CSV, binary trajectory dumps and minimal SVG charts."""

from __future__ import annotations

import csv
import io
import math
import struct
from pathlib import Path

import numpy as np

from .guidance import ScaleSchedule

STATE_MAGIC = b"PLRS"
STATE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

TRAJECTORY_COLUMNS = ("step", "t_train_index", "omega", "state_norm", "tau_norm")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """Write ``rows`` (dicts or sequences) under a header; reals get 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        w.writerow([format_value(v) for v in values])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def trajectory_rows(traj) -> list[tuple]:
    tau = traj.tau_norms()
    rows = []
    for k in range(len(traj.states)):
        omega = traj.omegas[k] if k < traj.steps else math.nan
        rows.append(
            (
                k,
                int(traj.t_train_index[k]),
                float(omega),
                float(np.linalg.norm(traj.states[k])),
                float(tau[k]) if k < len(tau) else math.nan,
            )
        )
    return rows


def write_trajectory_csv(path, traj) -> Path:
    return write_csv(path, TRAJECTORY_COLUMNS, trajectory_rows(traj))


def write_states(path, states) -> Path:
    """Dump a ``(steps, dim)`` array as a 16-byte header plus little-endian float64 data."""
    states = np.asarray(states, dtype="<f8")
    if states.ndim != 2:
        raise ValueError(f"states must be 2-D, got shape {states.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STATE_MAGIC, STATE_VERSION, states.shape[1], states.shape[0]))
        fh.write(np.ascontiguousarray(states).tobytes())
    return path


def read_states(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for a state header")
    magic, version, dim, steps = _HEADER.unpack_from(raw)
    if magic != STATE_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != STATE_VERSION:
        raise ValueError(f"unsupported version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != dim * steps:
        raise ValueError(f"expected {dim * steps} values, found {data.size}")
    return data.reshape(steps, dim).astype(np.float64)


def write_schedule_csv(path, schedule: ScaleSchedule) -> Path:
    return write_csv(path, ("step", "omega"), enumerate(schedule.omegas))


def read_schedule_csv(path) -> ScaleSchedule:
    rows = sorted(read_csv(path), key=lambda r: int(r["step"]))
    return ScaleSchedule([float(r["omega"]) for r in rows])


# -- SVG ------------------------------------------------------------------------

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "", logx=False, logy=False,
                   width: int = 480, height: int = 320) -> str:
    """Render ``{label: (xs, ys)}`` as a standalone SVG string."""
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(v)) if logy else float
    pts = {}
    for label, (xs, ys) in series.items():
        keep = [
            (tx(x), ty(y))
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)
        ]
        pts[label] = keep
    allp = [p for v in pts.values() for p in v] or [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    m = 48
    sx = lambda v: m + (v - x0) / (x1 - x0) * (width - 2 * m)
    sy = lambda v: height - m - (v - y0) / (y1 - y0) * (height - 2 * m)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}{" (log10)" if logx else ""}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" transform="rotate(-90 14 {height / 2})">'
        f'{_esc(ylabel)}{" (log10)" if logy else ""}</text>',
        f'<text x="{m}" y="{height - m + 14}" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{width - m}" y="{height - m + 14}" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{m - 4}" y="{height - m}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{m - 4}" y="{m + 4}" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (label, p) in enumerate(pts.items()):
        colour = _COLOURS[i % len(_COLOURS)]
        if p:
            path = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in p)
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{width - m - 4}" y="{m + 14 * (i + 1)}" text-anchor="end" fill="{colour}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series: dict, **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg_line_chart(series, **kw), encoding="utf-8")
    return path


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
