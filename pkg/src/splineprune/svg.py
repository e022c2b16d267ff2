"""Dependency-free SVG output for partition figures and metric curves.

Slice coordinates map to pixels as::

    px = margin + (u - u_min) / (u_max - u_min) * (width - 2 * margin)
    py = height - margin - (v - v_min) / (v_max - v_min) * (height - 2 * margin)

so ``v`` grows upwards as in a plot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .partition import BoundarySet, SliceGrid

LAYER_COLORS = ("#1f5fd6", "#2a9d3a", "#8e44ad", "#e67e22")
DECISION_COLOR = "#d62728"
POINT_COLORS = ("#444444", "#f0a500", "#17becf", "#bcbd22")


@dataclass
class Style:
    width: int = 480
    height: int = 480
    margin: int = 40
    stroke_width: float = 1.2
    layer_colors: Sequence[str] = LAYER_COLORS
    decision_color: str = DECISION_COLOR
    title: str | None = None


@dataclass
class _Frame:
    extent: tuple
    style: Style

    def to_px(self, u, v):
        (umin, umax), (vmin, vmax) = self.extent
        s = self.style
        px = s.margin + (np.asarray(u) - umin) / (umax - umin) * (s.width - 2 * s.margin)
        py = s.height - s.margin - (np.asarray(v) - vmin) / (vmax - vmin) * (s.height - 2 * s.margin)
        return px, py


def to_svg_coords(grid: SliceGrid, u, v, style: Style | None = None):
    return _Frame(grid.extent, style or Style()).to_px(u, v)


def _fmt(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _axes(frame: _Frame) -> list[str]:
    s = frame.style
    (umin, umax), (vmin, vmax) = frame.extent
    x0, y0 = frame.to_px(umin, vmin)
    x1, y1 = frame.to_px(umax, vmax)
    out = [f'<rect class="axes" x="{_fmt(x0)}" y="{_fmt(y1)}" width="{_fmt(x1 - x0)}" '
           f'height="{_fmt(y0 - y1)}" fill="none" stroke="#000" stroke-width="1"/>']
    for val, (px, py), anchor in ((umin, (x0, y0 + 16), "middle"), (umax, (x1, y0 + 16), "middle")):
        out.append(f'<text x="{_fmt(px)}" y="{_fmt(py)}" font-size="11" text-anchor="{anchor}">{val:g}</text>')
    for val, py in ((vmin, y0), (vmax, y1)):
        out.append(f'<text x="{_fmt(x0 - 6)}" y="{_fmt(py + 4)}" font-size="11" text-anchor="end">{val:g}</text>')
    if s.title:
        out.append(f'<text x="{_fmt(s.width / 2)}" y="{_fmt(s.margin / 2)}" font-size="13" '
                   f'text-anchor="middle">{escape(s.title)}</text>')
    return out


def render_svg(boundaries: Sequence[BoundarySet] | BoundarySet, grid: SliceGrid,
               style: Style | None = None, points=None, labels=None) -> str:
    """SVG with one ``<g>`` (holding one ``<path>``) per (kind, layer, unit).

    Hidden layer ``l`` is drawn in ``layer_colors[l]`` (blue, green, ...), the
    decision boundary in red.  ``points`` are optional ``(u, v)`` markers,
    coloured by ``labels``.
    """
    style = style or Style()
    if isinstance(boundaries, BoundarySet):
        boundaries = [boundaries]
    frame = _Frame(grid.extent, style)
    body = _axes(frame)
    if points is not None:
        pts = np.asarray(points, dtype=float)
        labs = np.zeros(len(pts), int) if labels is None else np.asarray(labels)
        px, py = frame.to_px(pts[:, 0], pts[:, 1])
        body.append('<g class="points">')
        for x, y, lab in zip(px, py, labs):
            col = POINT_COLORS[int(lab) % len(POINT_COLORS)]
            body.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="1.5" fill="{col}" fill-opacity="0.5"/>')
        body.append("</g>")
    for bs in boundaries:
        if len(bs) == 0:
            continue
        keys = sorted(set(zip(bs.layers.tolist(), bs.units.tolist())))
        for layer, unit in keys:
            sel = (bs.layers == layer) & (bs.units == unit)
            segs = bs.segments[sel]
            if bs.kind == "decision":
                color = style.decision_color
            else:
                color = style.layer_colors[layer % len(style.layer_colors)]
            px, py = frame.to_px(segs[..., 0], segs[..., 1])
            d = " ".join(f"M{_fmt(a)} {_fmt(b)} L{_fmt(c)} {_fmt(e)}"
                         for a, b, c, e in zip(px[:, 0], py[:, 0], px[:, 1], py[:, 1]))
            body.append(f'<g class="{bs.kind}" data-layer="{layer}" data-unit="{unit}">'
                        f'<path d="{d}" fill="none" stroke="{color}" stroke-width="{style.stroke_width}"/></g>')
    return _document(style.width, style.height, body)


def _document(width, height, body) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="#fff"/>', *body, "</svg>"]) + "\n"


def line_chart(series: dict, x_label: str = "", y_label: str = "", title: str | None = None,
               width: int = 520, height: int = 360, log_x: bool = False) -> str:
    """Plain polyline chart; ``series`` maps a name to ``(xs, ys)``."""
    margin = 50
    xs_all = np.concatenate([np.asarray(xs, float) for xs, _ in series.values()])
    ys_all = np.concatenate([np.asarray(ys, float) for _, ys in series.values()])
    tx = np.log10 if log_x else (lambda a: np.asarray(a, float))
    xmin, xmax = float(tx(xs_all).min()), float(tx(xs_all).max())
    ymin, ymax = float(np.nanmin(ys_all)), float(np.nanmax(ys_all))
    if xmax == xmin:
        xmin, xmax = xmin - 1, xmax + 1
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    style = Style(width=width, height=height, margin=margin, title=title)
    frame = _Frame(((xmin, xmax), (ymin, ymax)), style)
    body = _axes(frame)
    body.append(f'<text x="{_fmt(width / 2)}" y="{_fmt(height - 8)}" font-size="12" '
                f'text-anchor="middle">{escape(x_label)}</text>')
    body.append(f'<text x="14" y="{_fmt(height / 2)}" font-size="12" text-anchor="middle" '
                f'transform="rotate(-90 14 {_fmt(height / 2)})">{escape(y_label)}</text>')
    palette = LAYER_COLORS + (DECISION_COLOR,)
    for i, (name, (xs, ys)) in enumerate(series.items()):
        px, py = frame.to_px(tx(xs), np.asarray(ys, float))
        color = palette[i % len(palette)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
        body.append(f'<g class="series" data-name="{escape(str(name))}">'
                    f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in zip(px, py):
            body.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        body.append(f'<text x="{_fmt(width - margin + 4)}" y="{_fmt(margin + 14 * i)}" font-size="11" '
                    f'fill="{color}">{escape(str(name))}</text></g>')
    return _document(width, height, body)
