"""Self-contained SVG line charts of error rate against outer round."""

import csv
import pathlib
import re
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")
WIDTH, HEIGHT = 560, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 40, 50


def _slug(text):
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_")


def svg_chart(title, series, x_label="outer round", y_label="error rate (%)"):
    """``series`` maps a name to a list of y values in percent (x = 1, 2, ...)."""
    n = max((len(v) for v in series.values()), default=0)
    if n == 0:
        raise ValueError("svg_chart: no data")
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    sx = (lambda i: LEFT + pw * (i - 1) / (n - 1)) if n > 1 else (lambda i: LEFT + pw / 2)
    sy = lambda v: TOP + ph * (1 - v / 100.0)  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{LEFT + pw / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for v in range(0, 101, 20):
        y = sy(v)
        out.append(f'<line x1="{LEFT}" y1="{y:.1f}" x2="{LEFT + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v}</text>')
    for i in range(1, n + 1):
        out.append(f'<text x="{sx(i):.1f}" y="{TOP + ph + 16}" text-anchor="middle">{i}</text>')
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text transform="translate(16 {TOP + ph / 2}) rotate(-90)" text-anchor="middle">{escape(y_label)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(i + 1):.1f},{sy(v):.1f}" for i, v in enumerate(ys))
        out.append(f'<polyline class="series" data-name="{escape(name)}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        ly = TOP + 14 + 18 * k
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(report, out_dir):
    """One SVG per evaluation entry (plus clean error), one CSV per curve."""
    out = pathlib.Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create plot directory {out}: {exc}") from exc
    if not report.modes:
        raise ValueError("emit_plots: report has no results")
    figures = {"clean": {m: r.clean_curve for m, r in report.modes.items()}}
    for key in report.entries:
        figures[key] = {m: r.curve[key] for m, r in report.modes.items()}
    written = []
    for key, series in figures.items():
        slug = _slug(key)
        svg = out / f"{slug}.svg"
        svg.write_text(svg_chart(f"{report.name}: {key}", series))
        written.append(svg)
        for mode, ys in series.items():
            path = out / f"{slug}__{mode}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["round", "error_rate"])
                w.writerows((i + 1, repr(v)) for i, v in enumerate(ys))
            written.append(path)
    return written
