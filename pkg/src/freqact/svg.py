"""Tiny SVG writers (rect/path primitives only) for the CLI reports."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _doc(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n{body}</svg>\n')


def _text(x, y, s, anchor="start"):
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}">{escape(str(s))}</text>\n'


def heatmap(values, row_labels, col_labels, title=""):
    """Rows x columns of values in [0, 1]; darker cells hold more energy."""
    cell_w, cell_h, left, top = 44, 22, 70, 40
    n_rows, n_cols = len(values), len(values[0])
    width, height = left + n_cols * cell_w + 20, top + n_rows * cell_h + 50
    body = [_text(left, 20, title)]
    for r, row in enumerate(values):
        body.append(_text(left - 6, top + r * cell_h + 15, row_labels[r], "end"))
        for c, v in enumerate(row):
            v = min(max(float(v), 0.0), 1.0)
            shade = int(round(255 * (1 - v)))
            fill = f"#{shade:02x}{shade:02x}ff"
            x, y = left + c * cell_w, top + r * cell_h
            body.append(f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" '
                        f'stroke="#888" stroke-width="0.5"><title>{v:.4f}</title></rect>\n')
    for c, label in enumerate(col_labels):
        body.append(_text(left + c * cell_w + cell_w / 2, top + n_rows * cell_h + 16, label, "middle"))
    return _doc(width, height, "".join(body))


def line_plot(series, title="", xlabel="", ylabel="", width=520, height=320):
    """``series`` is a list of (label, xs, ys); axes are scaled to the data."""
    left, right, top, bottom = 60, 130, 30, 40
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    body = [_text(left, 18, title),
            f'<path d="M{left},{top} V{top + ph} H{left + pw}" fill="none" stroke="black"/>\n',
            _text(left + pw / 2, height - 8, xlabel, "middle"),
            _text(8, top + ph / 2, ylabel),
            _text(left - 4, top + 4, f"{y1:.3g}", "end"),
            _text(left - 4, top + ph, f"{y0:.3g}", "end"),
            _text(left, top + ph + 14, f"{x0:.3g}", "middle"),
            _text(left + pw, top + ph + 14, f"{x1:.3g}", "middle")]
    for i, (label, sx, sy) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        d = " ".join(f"{'M' if j == 0 else 'L'}{px(x):.2f},{py(y):.2f}" for j, (x, y) in enumerate(zip(sx, sy)))
        body.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>\n')
        ly = top + 14 * i + 6
        body.append(f'<rect x="{left + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>\n')
        body.append(_text(left + pw + 24, ly + 1, label))
    return _doc(width, height, "".join(body))
