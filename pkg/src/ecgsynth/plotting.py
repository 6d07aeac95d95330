"""Dependency-free SVG line plots."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _polyline(xs, ys, x0, y0, w, h, xlim, ylim, color, width=1.2) -> str:
    (xa, xb), (ya, yb) = xlim, ylim
    sx = w / (xb - xa) if xb > xa else 0.0
    sy = h / (yb - ya) if yb > ya else 0.0
    pts = " ".join(f"{x0 + (x - xa) * sx:.2f},{y0 + h - (y - ya) * sy:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def _limits(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _text(x, y, s, size=11, anchor="start") -> str:
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{escape(str(s))}</text>'


def _document(width, height, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def line_panels(panels: list[dict], columns: int = 1, panel_size=(420, 180), title: str = "") -> str:
    """Grid of panels; each is {"title", "series": {label: (x, y)}, "xlabel", "ylabel"}."""
    pw, ph = panel_size
    rows = -(-len(panels) // columns)
    top = 28 if title else 6
    width, height = columns * pw, top + rows * ph
    body = [_text(width / 2, 18, title, 14, "middle")] if title else []
    for i, panel in enumerate(panels):
        r, c = divmod(i, columns)
        ox, oy = c * pw, top + r * ph
        x0, y0, w, h = ox + 48, oy + 20, pw - 64, ph - 48
        series = panel["series"]
        xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
        ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
        xlim, ylim = _limits(xs_all), _limits(ys_all)
        body.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#999"/>')
        body.append(_text(ox + pw / 2, oy + 14, panel.get("title", ""), 12, "middle"))
        body.append(_text(x0 - 4, y0 + 10, f"{ylim[1]:.3g}", 9, "end"))
        body.append(_text(x0 - 4, y0 + h, f"{ylim[0]:.3g}", 9, "end"))
        body.append(_text(x0, y0 + h + 12, f"{xlim[0]:.3g}", 9))
        body.append(_text(x0 + w, y0 + h + 12, f"{xlim[1]:.3g}", 9, "end"))
        if panel.get("xlabel"):
            body.append(_text(x0 + w / 2, y0 + h + 24, panel["xlabel"], 10, "middle"))
        for j, (label, (xs, ys)) in enumerate(series.items()):
            color = PALETTE[j % len(PALETTE)]
            body.append(_polyline(np.asarray(xs, float), np.asarray(ys, float), x0, y0, w, h,
                                  xlim, ylim, color))
            if len(series) > 1:
                body.append(f'<text x="{x0 + w - 4}" y="{y0 + 12 + 11 * j}" font-size="9" '
                            f'text-anchor="end" fill="{color}" font-family="sans-serif">{escape(label)}</text>')
    return _document(width, height, body)


def record_svg(signals: np.ndarray, view_names, title: str = "") -> str:
    """Twelve-panel plot of one record, two columns."""
    t = np.arange(signals.shape[-1])
    panels = [{"title": name, "series": {name: (t, sig)}} for name, sig in zip(view_names, signals)]
    return line_panels(panels, columns=2, panel_size=(360, 110), title=title)


def curves_svg(curves: dict[str, np.ndarray], title: str = "", ylabel: str = "rFID") -> str:
    """One panel per track, as in a perturbation study."""
    panels = [{"title": name, "series": {name: (np.arange(len(v)), v)}, "xlabel": "step",
               "ylabel": ylabel} for name, v in curves.items()]
    return line_panels(panels, columns=len(panels), panel_size=(300, 220), title=title)


def loss_svg(log: np.ndarray, names, title: str = "losses") -> str:
    steps = log[:, 0]
    panels = [{"title": name, "series": {name: (steps, log[:, i + 1])}, "xlabel": "step"}
              for i, name in enumerate(names)]
    return line_panels(panels, columns=1, panel_size=(520, 150), title=title)


def write_svg(text: str, path) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
