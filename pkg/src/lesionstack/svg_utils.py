"""Utilities for building simple SVG line charts with lxml."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

from lxml import etree

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from lxml.etree import _Element as EtreeElement

SVG_NAMESPACE = "http://www.w3.org/2000/svg"
NAMESPACES = {None: SVG_NAMESPACE}

WIDTH = 480
HEIGHT = 400
MARGIN = 56
PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
)


def create_element(
    tag_name: str,
    attributes: Mapping[str, str | float] | None = None,
    parent: EtreeElement | None = None,
) -> EtreeElement:
    """Create an SVG element, optionally appended to a parent.

    Args:
        tag_name: Local SVG tag name.
        attributes: Plain attribute names and values; numbers are
            formatted with three decimals.
        parent: Element to append the new element to.

    Returns:
        The created lxml element.
    """
    full_tag_name = f"{{{SVG_NAMESPACE}}}{tag_name}"
    if parent is None:
        element = etree.Element(full_tag_name, nsmap=NAMESPACES)
    else:
        element = etree.SubElement(parent, full_tag_name)
    for name, value in (attributes or {}).items():
        element.set(name, f"{value:.3f}" if isinstance(value, float) else str(value))
    return element


def find_all_elements(root: EtreeElement, tag_name: str) -> list[EtreeElement]:
    """All descendants with a local SVG tag name."""
    return root.findall(f".//{{{SVG_NAMESPACE}}}{tag_name}")


class ChartFrame:
    """Maps data coordinates onto the drawing area of a chart."""

    def __init__(
        self,
        x_range: tuple[float, float],
        y_range: tuple[float, float],
    ) -> None:
        """Initialize with data ranges; empty ranges are widened."""
        self.x_range = _widen(x_range)
        self.y_range = _widen(y_range)

    def x(self, value: float) -> float:
        """Horizontal pixel position."""
        lo, hi = self.x_range
        return MARGIN + (value - lo) / (hi - lo) * (WIDTH - 2 * MARGIN)

    def y(self, value: float) -> float:
        """Vertical pixel position (data y grows upwards)."""
        lo, hi = self.y_range
        return HEIGHT - MARGIN - (value - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN)


def _widen(bounds: tuple[float, float]) -> tuple[float, float]:
    lo, hi = bounds
    if hi <= lo:
        return lo - 0.5, lo + 0.5
    return lo, hi


def _axes(
    root: EtreeElement,
    frame: ChartFrame,
    x_label: str,
    y_label: str,
) -> None:
    group = create_element("g", {"class": "axes", "stroke": "#000"}, root)
    x0, x1 = frame.x(frame.x_range[0]), frame.x(frame.x_range[1])
    y0, y1 = frame.y(frame.y_range[0]), frame.y(frame.y_range[1])
    create_element("line", {"x1": x0, "y1": y0, "x2": x1, "y2": y0}, group)
    create_element("line", {"x1": x0, "y1": y0, "x2": x0, "y2": y1}, group)
    for index, (value, pixel) in enumerate(
        (
            (frame.x_range[0], x0),
            (frame.x_range[1], x1),
        ),
    ):
        tick = create_element(
            "text",
            {
                "x": pixel,
                "y": y0 + 16,
                "text-anchor": "start" if index == 0 else "end",
                "font-size": 11,
                "class": "x-tick",
            },
            group,
        )
        tick.text = f"{value:g}"
    for value in frame.y_range:
        tick = create_element(
            "text",
            {
                "x": x0 - 6,
                "y": frame.y(value) + 4,
                "text-anchor": "end",
                "font-size": 11,
                "class": "y-tick",
            },
            group,
        )
        tick.text = f"{value:g}"
    label = create_element(
        "text",
        {"x": (x0 + x1) / 2, "y": HEIGHT - 12, "text-anchor": "middle"},
        group,
    )
    label.text = x_label
    label = create_element(
        "text",
        {
            "x": 16,
            "y": (y0 + y1) / 2,
            "text-anchor": "middle",
            "transform": f"rotate(-90 16 {(y0 + y1) / 2:.3f})",
        },
        group,
    )
    label.text = y_label


def line_chart(
    series: Mapping[str, Sequence[tuple[float, float]]],
    *,
    title: str,
    x_label: str,
    y_label: str,
    x_range: tuple[float, float] | None = None,
    y_range: tuple[float, float] | None = None,
    diagonal: bool = False,
) -> EtreeElement:
    """Build an SVG chart with one polyline per named series.

    Args:
        series: Name -> (x, y) points in drawing order.
        title: Chart title.
        x_label: Horizontal axis label.
        y_label: Vertical axis label.
        x_range: Data range of the x axis; defaults to the data extent.
        y_range: Data range of the y axis; defaults to the data extent.
        diagonal: Draw the dashed chance line from (0, 0) to (1, 1).

    Returns:
        The ``<svg>`` root element.
    """
    points = [p for values in series.values() for p in values]
    if x_range is None:
        xs = [p[0] for p in points] or [0.0, 1.0]
        x_range = (min(xs), max(xs))
    if y_range is None:
        ys = [p[1] for p in points] or [0.0, 1.0]
        y_range = (min(ys), max(ys))
    frame = ChartFrame(x_range, y_range)

    root = create_element(
        "svg",
        {
            "width": WIDTH,
            "height": HEIGHT,
            "viewBox": f"0 0 {WIDTH} {HEIGHT}",
            "data-x-range": f"{frame.x_range[0]:g} {frame.x_range[1]:g}",
            "data-y-range": f"{frame.y_range[0]:g} {frame.y_range[1]:g}",
        },
    )
    heading = create_element(
        "text",
        {"x": WIDTH / 2, "y": 24, "text-anchor": "middle", "font-size": 14},
        root,
    )
    heading.text = title
    _axes(root, frame, x_label, y_label)
    if diagonal:
        create_element(
            "line",
            {
                "x1": frame.x(0.0),
                "y1": frame.y(0.0),
                "x2": frame.x(1.0),
                "y2": frame.y(1.0),
                "stroke": "#999",
                "stroke-dasharray": "4 4",
            },
            root,
        )
    for index, (name, values) in enumerate(series.items()):
        colour = PALETTE[index % len(PALETTE)]
        create_element(
            "polyline",
            {
                "points": " ".join(
                    f"{frame.x(x):.3f},{frame.y(y):.3f}" for x, y in values
                ),
                "fill": "none",
                "stroke": colour,
                "stroke-width": 1.5,
                "data-series": name,
            },
            root,
        )
        legend = create_element(
            "text",
            {
                "x": WIDTH - MARGIN,
                "y": MARGIN + 14 * index,
                "text-anchor": "end",
                "font-size": 10,
                "fill": colour,
            },
            root,
        )
        legend.text = name
    return root


def write_svg(root: EtreeElement, path: str | Path) -> Path:
    """Serialize an SVG tree with an XML declaration."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(
        etree.tostring(
            root,
            xml_declaration=True,
            encoding="utf-8",
            pretty_print=True,
        ),
    )
    return target


def read_svg(path: str | Path) -> EtreeElement:
    """Parse an SVG file written by :func:`write_svg`."""
    return etree.parse(str(path)).getroot()
