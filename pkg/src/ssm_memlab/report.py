"""CSV and SVG emitters.

Every float is written with 9 significant digits so reruns from the same
config produce byte-identical files. SVG charts are hand-assembled (line
chart, bar chart, heatmap) and carry the config hash and seed in a footer.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


def fmt(x):
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.9g}"
    if hasattr(x, "item"):  # numpy scalar
        return fmt(x.item())
    return str(x)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def write_csv(path, rows, columns=None):
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c, "")) for c in columns])
    return path


def read_csv(path):
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# SVG

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 70


def _nice_ticks(lo, hi, n=5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi == lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-12 * abs(step):
        ticks.append(round(v, 12))
        v += step
    return ticks


def _frame(title, xlabel, ylabel, footer):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.9g}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{LEFT + (W - LEFT - RIGHT) / 2:.9g}" y="{H - 30}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{TOP + (H - TOP - BOTTOM) / 2:.9g}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + (H - TOP - BOTTOM) / 2:.9g})">{escape(ylabel)}</text>',
        f'<text x="{W - 8}" y="{H - 8}" text-anchor="end" font-size="9" fill="#555">{escape(footer)}</text>',
    ]


def _axes(parts, xlo, xhi, ylo, yhi, xticks=None):
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - xlo) / (xhi - xlo) * pw if xhi != xlo else LEFT + pw / 2

    def sy(y):
        return TOP + ph - (y - ylo) / (yhi - ylo) * ph if yhi != ylo else TOP + ph / 2

    parts.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    parts.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    for t in _nice_ticks(ylo, yhi):
        if ylo - 1e-12 <= t <= yhi + 1e-12:
            parts.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.9g}" x2="{LEFT}" y2="{sy(t):.9g}" stroke="black"/>')
            parts.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.9g}" text-anchor="end">{fmt(float(t))}</text>')
    for t in xticks if xticks is not None else _nice_ticks(xlo, xhi):
        if xlo - 1e-12 <= t <= xhi + 1e-12:
            parts.append(f'<line x1="{sx(t):.9g}" y1="{TOP + ph}" x2="{sx(t):.9g}" y2="{TOP + ph + 4}" stroke="black"/>')
            parts.append(f'<text x="{sx(t):.9g}" y="{TOP + ph + 16}" text-anchor="middle">{fmt(t)}</text>')
    return sx, sy


def _legend(parts, names):
    for i, name in enumerate(names):
        y = TOP + 10 + 16 * i
        x = W - RIGHT + 12
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="3" fill="{color}"/>')
        parts.append(f'<text x="{x + 16}" y="{y - 3}">{escape(str(name))}</text>')


def line_chart(path, series, title, xlabel, ylabel, footer="", ylim=None, bands=None):
    """``series``: ``{name: (xs, ys)}``; ``bands``: optional ``{name: (lo, hi)}``."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if math.isfinite(y)]
    for lo, hi in (bands or {}).values():
        ys_all += [v for v in list(lo) + list(hi) if math.isfinite(v)]
    xlo, xhi = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    ylo, yhi = ylim if ylim else ((min(ys_all), max(ys_all)) if ys_all else (0, 1))
    if yhi == ylo:
        yhi = ylo + 1.0
    parts = _frame(title, xlabel, ylabel, footer)
    xticks = sorted(set(xs_all)) if len(set(xs_all)) <= 16 else None
    sx, sy = _axes(parts, xlo, xhi, ylo, yhi, xticks)
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if bands and name in bands:
            lo, hi = bands[name]
            pts = [(sx(x), sy(v)) for x, v in zip(xs, hi)] + [(sx(x), sy(v)) for x, v in reversed(list(zip(xs, lo)))]
            poly = " ".join(f"{a:.9g},{b:.9g}" for a, b in pts)
            parts.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{sx(x):.9g},{sy(y):.9g}" for x, y in zip(xs, ys) if math.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            if math.isfinite(y):
                parts.append(f'<circle cx="{sx(x):.9g}" cy="{sy(y):.9g}" r="2.5" fill="{color}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return path


def bar_chart(path, labels, values, title, xlabel, ylabel, footer=""):
    parts = _frame(title, xlabel, ylabel, footer)
    top = max(list(values) + [1])
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    _, sy = _axes(parts, 0, 1, 0, top, xticks=[])
    n = max(len(values), 1)
    slot = pw / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = LEFT + i * slot + slot * 0.15
        parts.append(
            f'<rect x="{x:.9g}" y="{sy(v):.9g}" width="{slot * 0.7:.9g}" height="{TOP + ph - sy(v):.9g}" fill="{PALETTE[0]}"/>'
        )
        parts.append(f'<text x="{x + slot * 0.35:.9g}" y="{TOP + ph + 16}" text-anchor="middle">{escape(str(lab))}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return path


def heatmap(path, matrix, row_labels, title, xlabel, ylabel, footer=""):
    """Rows top to bottom, columns left to right, white-to-blue scale."""
    rows = [list(map(float, r)) for r in matrix]
    flat = [v for r in rows for v in r if math.isfinite(v)]
    lo, hi = (min(flat), max(flat)) if flat else (0.0, 1.0)
    span = hi - lo or 1.0
    parts = _frame(title, xlabel, ylabel, footer)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    nr, nc = len(rows), max((len(r) for r in rows), default=1)
    cw, ch = pw / nc, ph / max(nr, 1)
    for i, r in enumerate(rows):
        for j, v in enumerate(r):
            s = (v - lo) / span if math.isfinite(v) else 0.0
            rgb = tuple(int(round(255 - s * (255 - c))) for c in (31, 119, 180))
            parts.append(
                f'<rect x="{LEFT + j * cw:.9g}" y="{TOP + i * ch:.9g}" width="{cw:.9g}" height="{ch:.9g}" '
                f'fill="rgb{rgb}"/>'
            )
        parts.append(f'<text x="{LEFT - 6}" y="{TOP + (i + 0.5) * ch + 4:.9g}" text-anchor="end">{escape(str(row_labels[i]))}</text>')
    for j in range(0, nc, max(1, nc // 8)):
        parts.append(f'<text x="{LEFT + (j + 0.5) * cw:.9g}" y="{TOP + ph + 16}" text-anchor="middle">{j}</text>')
    parts.append(f'<text x="{W - RIGHT + 12}" y="{TOP + 10}">min {fmt(lo)}</text>')
    parts.append(f'<text x="{W - RIGHT + 12}" y="{TOP + 26}">max {fmt(hi)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return path
