"""Tiny deterministic SVG emitters for sweep line plots and alignment heat maps.

Hand-rolled so output bytes depend only on the data, which keeps plots
diffable in tests.
"""

from __future__ import annotations


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _panel(lines, x0, y0, width, height, xs, series, title, y_label):
    lo = min(min(ys) for _, ys in series)
    hi = max(max(ys) for _, ys in series)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    x_lo, x_hi = min(xs), max(xs)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0

    def px(x):
        return x0 + (x - x_lo) / (x_hi - x_lo) * width

    def py(y):
        return y0 + height - (y - lo) / (hi - lo) * height

    lines.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(width)}" '
                 f'height="{_fmt(height)}" fill="none" stroke="#888"/>')
    lines.append(f'<text x="{_fmt(x0)}" y="{_fmt(y0 - 8)}" font-size="13" '
                 f'font-family="sans-serif">{title}</text>')
    lines.append(f'<text x="{_fmt(x0 - 38)}" y="{_fmt(y0 + height / 2)}" font-size="11" '
                 f'font-family="sans-serif" transform="rotate(-90 {_fmt(x0 - 38)} '
                 f'{_fmt(y0 + height / 2)})">{y_label}</text>')
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for i, (name, ys) in enumerate(series):
        color = colors[i % len(colors)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        lines.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            lines.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" '
                         f'fill="{color}"/>')
        lines.append(f'<text x="{_fmt(x0 + width + 6)}" y="{_fmt(y0 + 14 + 14 * i)}" '
                     f'font-size="11" font-family="sans-serif" fill="{color}">{name}</text>')
    for x in xs:
        lines.append(f'<text x="{_fmt(px(x) - 6)}" y="{_fmt(y0 + height + 14)}" '
                     f'font-size="10" font-family="sans-serif">{_fmt(x)}</text>')
    for frac in (0.0, 0.5, 1.0):
        y = lo + frac * (hi - lo)
        lines.append(f'<text x="{_fmt(x0 - 34)}" y="{_fmt(py(y) + 4)}" font-size="10" '
                     f'font-family="sans-serif">{y:.3g}</text>')


def line_plot(path: str, xs, panels, x_label: str):
    """panels: list of (title, y_label, [(series_name, ys), ...]), stacked vertically."""
    width, height = 420, 170
    margin_x, margin_y, gap = 60, 40, 50
    total_h = margin_y + len(panels) * (height + gap)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + margin_x + 90}" '
             f'height="{total_h}" viewBox="0 0 {width + margin_x + 90} {total_h}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for i, (title, y_label, series) in enumerate(panels):
        y0 = margin_y + i * (height + gap)
        _panel(lines, margin_x, y0, width, height, xs, series, title, y_label)
    lines.append(f'<text x="{margin_x + width / 2 - 30}" y="{total_h - 8}" font-size="11" '
                 f'font-family="sans-serif">{x_label}</text>')
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def heat_map(path: str, matrix, row_labels=None, title: str = ""):
    """Grayscale heat map of a (rows, cols) matrix, one rect per cell."""
    rows = len(matrix)
    cols = len(matrix[0])
    cell = max(4, min(12, 700 // max(cols, 1)))
    label_w = 34 if row_labels else 0
    width = label_w + cols * cell + 10
    height = rows * cell + 40
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="4" y="14" font-size="12" font-family="sans-serif">{title}</text>']
    top = 24
    peak = max(max(row) for row in matrix) or 1.0
    for r, row in enumerate(matrix):
        if row_labels:
            lines.append(f'<text x="2" y="{top + r * cell + cell - 1}" font-size="{max(cell - 2, 4)}" '
                         f'font-family="monospace">{_escape(row_labels[r])}</text>')
        for c, value in enumerate(row):
            level = int(round(255 * (1.0 - min(max(value / peak, 0.0), 1.0))))
            color = f"#{level:02x}{level:02x}ff" if level < 255 else "#ffffff"
            lines.append(f'<rect x="{label_w + c * cell}" y="{top + r * cell}" '
                         f'width="{cell}" height="{cell}" fill="{color}"/>')
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _escape(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))
