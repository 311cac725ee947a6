"""Self-contained SVG emission for the two report figures: critical-difference
diagrams over average ranks, and per-instance importance bars with interval
whiskers. Plot data is also written as JSON so external tools can re-render."""

from __future__ import annotations

import json

import numpy as np


def _esc(text):
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _line(x1, y1, x2, y2, width=1.0, color="#333"):
    return (
        f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
        f'stroke="{color}" stroke-width="{width}" />'
    )


def _text(x, y, s, size=11, anchor="start", color="#111"):
    return (
        f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
        f'text-anchor="{anchor}" fill="{color}">{_esc(s)}</text>'
    )


def _rect(x, y, w, h, color):
    return f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{color}" />'


def _svg(width, height, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n' + "\n".join(body) + "\n</svg>\n"
    )


def cd_diagram_svg(method_names, avg_ranks, cd, title="") -> str:
    """Methods placed on a rank axis, grouped by the critical difference.

    Indistinguishable methods (average-rank gap within the CD) are joined
    by thick bars below the axis, classic post-hoc diagram layout.
    """
    ranks = np.asarray(avg_ranks, dtype=np.float64)
    k = len(ranks)
    order = np.argsort(ranks, kind="stable")
    width = 760
    margin = 90
    axis_y = 70
    scale = (width - 2 * margin) / max(k - 1, 1)

    def x_of(rank):
        return margin + (rank - 1) * scale

    body = []
    if title:
        body.append(_text(width / 2, 20, title, size=13, anchor="middle"))
    body.append(_line(x_of(1), axis_y, x_of(k), axis_y, width=1.5))
    for tick in range(1, k + 1):
        body.append(_line(x_of(tick), axis_y - 5, x_of(tick), axis_y + 5))
        body.append(_text(x_of(tick), axis_y - 10, str(tick), anchor="middle"))

    # CD ruler above the axis, anchored at rank 1
    body.append(_line(x_of(1), 38, x_of(1 + cd), 38, width=2.0, color="#000"))
    body.append(_line(x_of(1), 34, x_of(1), 42))
    body.append(_line(x_of(1 + cd), 34, x_of(1 + cd), 42))
    body.append(_text(x_of(1 + cd) + 6, 42, f"CD = {cd:.3f}", size=11))

    # cliques of methods whose extremes differ by at most CD
    clique_y = axis_y + 12
    cliques = []
    i = 0
    while i < k:
        j = i
        while j + 1 < k and ranks[order[j + 1]] - ranks[order[i]] <= cd:
            j += 1
        if j > i and not any(c[0] <= i and j <= c[1] for c in cliques):
            cliques.append((i, j))
        i += 1
    for a, b in cliques:
        body.append(
            _line(x_of(ranks[order[a]]), clique_y, x_of(ranks[order[b]]), clique_y, width=4.0, color="#555")
        )
        clique_y += 7

    # method stems, alternating left/right label columns
    label_y_left = clique_y + 18
    label_y_right = clique_y + 18
    half = (k + 1) // 2
    for pos, m in enumerate(order):
        r = ranks[m]
        if pos < half:
            ly = label_y_left
            label_y_left += 16
            lx = margin - 8
            anchor = "end"
        else:
            ly = label_y_right
            label_y_right += 16
            lx = width - margin + 8
            anchor = "start"
        body.append(_line(x_of(r), axis_y, x_of(r), ly - 4, width=0.8, color="#777"))
        body.append(_line(x_of(r), ly - 4, lx, ly - 4, width=0.8, color="#777"))
        body.append(_text(lx, ly, f"{method_names[m]} ({r:.2f})", anchor=anchor))

    height = max(label_y_left, label_y_right) + 16
    return _svg(width, height, body)


def interval_bars_svg(feature_names, truth, points, lo, hi, title="") -> str:
    """Ground-truth importance bars with conformal whiskers and point markers."""
    truth = np.asarray(truth, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = len(truth)
    width = max(420, 70 * n + 120)
    height = 320
    margin_l, margin_b, margin_t = 70, 60, 40
    plot_w = width - margin_l - 30
    plot_h = height - margin_t - margin_b

    vmax = float(max(np.max(hi), np.max(truth), 0.0))
    vmin = float(min(np.min(lo), np.min(truth), 0.0))
    span = (vmax - vmin) or 1.0

    def y_of(v):
        return margin_t + (vmax - v) / span * plot_h

    slot = plot_w / n
    bar_w = slot * 0.5

    body = []
    if title:
        body.append(_text(width / 2, 20, title, size=13, anchor="middle"))
    body.append(_line(margin_l, y_of(0.0), margin_l + plot_w, y_of(0.0), width=1.2))
    body.append(_line(margin_l, margin_t, margin_l, margin_t + plot_h, width=1.2))
    for frac in (0.0, 0.5, 1.0):
        v = vmin + frac * span
        body.append(_text(margin_l - 8, y_of(v) + 4, f"{v:.3g}", anchor="end", size=10))
        body.append(_line(margin_l - 4, y_of(v), margin_l, y_of(v)))

    for f in range(n):
        cx = margin_l + slot * (f + 0.5)
        x0 = cx - bar_w / 2
        top = min(y_of(truth[f]), y_of(0.0))
        hgt = abs(y_of(truth[f]) - y_of(0.0))
        color = "#4e79a7" if truth[f] >= 0 else "#e15759"
        body.append(_rect(x0, top, bar_w, hgt, color))
        body.append(_line(cx, y_of(lo[f]), cx, y_of(hi[f]), width=1.6, color="#222"))
        body.append(_line(cx - 6, y_of(lo[f]), cx + 6, y_of(lo[f]), width=1.6, color="#222"))
        body.append(_line(cx - 6, y_of(hi[f]), cx + 6, y_of(hi[f]), width=1.6, color="#222"))
        body.append(
            f'<circle cx="{cx:.2f}" cy="{y_of(points[f]):.2f}" r="3" fill="#fff" stroke="#222" />'
        )
        body.append(
            _text(cx, margin_t + plot_h + 16, feature_names[f], size=9, anchor="middle")
        )
    return _svg(width, height, body)


def write_cd_diagram(path_base, method_names, avg_ranks, cd, title=""):
    """Emit <base>.svg and <base>.json."""
    svg = cd_diagram_svg(method_names, avg_ranks, cd, title)
    with open(str(path_base) + ".svg", "w", encoding="utf-8") as fh:
        fh.write(svg)
    data = {
        "kind": "cd-diagram",
        "title": title,
        "methods": list(method_names),
        "avg_ranks": [float(r) for r in avg_ranks],
        "cd": float(cd),
    }
    with open(str(path_base) + ".json", "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, allow_nan=False)


def write_interval_bars(path_base, feature_names, truth, points, lo, hi, title=""):
    svg = interval_bars_svg(feature_names, truth, points, lo, hi, title)
    with open(str(path_base) + ".svg", "w", encoding="utf-8") as fh:
        fh.write(svg)
    data = {
        "kind": "interval-bars",
        "title": title,
        "features": list(feature_names),
        "truth": [float(v) for v in truth],
        "point": [float(v) for v in points],
        "lo": [float(v) for v in lo],
        "hi": [float(v) for v in hi],
    }
    with open(str(path_base) + ".json", "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, allow_nan=False)
