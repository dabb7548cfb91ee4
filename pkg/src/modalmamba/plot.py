"""Dependency-free SVG line plots for loss curves and match points."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Optional, Sequence

WIDTH, HEIGHT = 640, 400
MARGIN = 54
PALETTE = ("#0e7c9c", "#e07b18", "#4f9143", "#8d4fb3", "#b33a3a", "#6d6d6d")


def _scaler(lo: float, hi: float, out_lo: float, out_hi: float):
    span = (hi - lo) or 1.0

    def scale(v: float) -> float:
        return out_lo + (v - lo) / span * (out_hi - out_lo)

    return scale


def render_curves(curves: Sequence[tuple[str, Sequence[float], Sequence[float]]],
                  title: str = "", x_label: str = "step", y_label: str = "loss",
                  marker: Optional[tuple[float, float]] = None) -> str:
    """One <path> element per named curve; optional circle marker.

    `curves` is a list of (label, xs, ys). Returns the SVG document text.
    """
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(WIDTH), height=str(HEIGHT),
                     viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT),
                  fill="white")

    xs_all = [x for _, xs, _ in curves for x in xs]
    ys_all = [y for _, _, ys in curves for y in ys]
    if marker is not None:
        xs_all.append(marker[0])
        ys_all.append(marker[1])
    sx = _scaler(min(xs_all), max(xs_all), MARGIN, WIDTH - MARGIN)
    sy = _scaler(min(ys_all), max(ys_all), HEIGHT - MARGIN, MARGIN)

    # axes are <line> elements so the file holds exactly one <path> per curve
    ET.SubElement(svg, "line", x1=str(MARGIN), y1=str(MARGIN), x2=str(MARGIN),
                  y2=str(HEIGHT - MARGIN), stroke="#222")
    ET.SubElement(svg, "line", x1=str(MARGIN), y1=str(HEIGHT - MARGIN),
                  x2=str(WIDTH - MARGIN), y2=str(HEIGHT - MARGIN), stroke="#222")

    for i, (label, xs, ys) in enumerate(curves):
        pts = " L ".join(f"{sx(x):.2f} {sy(y):.2f}" for x, y in zip(xs, ys))
        ET.SubElement(svg, "path", d=f"M {pts}", fill="none",
                      stroke=PALETTE[i % len(PALETTE)], attrib={"stroke-width": "1.6"})
        legend_y = MARGIN + 16 * i
        ET.SubElement(svg, "text", x=str(WIDTH - MARGIN - 150), y=str(legend_y),
                      fill=PALETTE[i % len(PALETTE)],
                      attrib={"font-size": "12"}).text = label

    if marker is not None:
        ET.SubElement(svg, "circle", cx=f"{sx(marker[0]):.2f}",
                      cy=f"{sy(marker[1]):.2f}", r="5",
                      fill="none", stroke="#111", attrib={"stroke-width": "1.5"})

    for text, x, y in ((title, WIDTH / 2, 24),
                       (x_label, WIDTH / 2, HEIGHT - 14)):
        if text:
            ET.SubElement(svg, "text", x=str(x), y=str(y),
                          attrib={"text-anchor": "middle", "font-size": "13"},
                          fill="#111").text = text
    if y_label:
        el = ET.SubElement(svg, "text", x="18", y=str(HEIGHT / 2), fill="#111",
                           attrib={"font-size": "13",
                                   "transform": f"rotate(-90 18 {HEIGHT / 2})"})
        el.text = y_label

    return ET.tostring(svg, encoding="unicode")


def save_svg(path, svg_text: str) -> None:
    with open(path, "w") as fp:
        fp.write(svg_text)
        fp.write("\n")
