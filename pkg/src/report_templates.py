"""
Report Templates and Chart Helper Functions
- Line and bar charts rendered as plain SVG text, byte-identical for identical input.
"""

import math
from typing import Any, Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

WIDTH = 720
HEIGHT = 420
MARGIN_LEFT = 72
MARGIN_RIGHT = 170
MARGIN_TOP = 44
MARGIN_BOTTOM = 56

# fixed colors per strategy keep charts comparable across reports
SERIES_COLORS = {"ch3l3": "#1f77b4", "rlr": "#d62728", "l3count": "#2ca02c"}
FALLBACK_COLORS = ["#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def series_color(label: str, position: int) -> str:
    lowered = label.lower()
    for key, color in SERIES_COLORS.items():
        if key in lowered:
            return color
    return FALLBACK_COLORS[position % len(FALLBACK_COLORS)]


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _tick_label(value: float) -> str:
    return f"{value:.4g}"


class Axis:
    """Maps data values onto a pixel interval, linearly or in log10."""

    def __init__(self, values: Sequence[float], start: float, end: float, log: bool = False):
        values = [v for v in values if math.isfinite(v) and (v > 0 or not log)]
        if not values:
            values = [1.0] if log else [0.0]
        low, high = min(values), max(values)
        if log:
            low, high = math.log10(low), math.log10(high)
        if high == low:
            low, high = low - 0.5, high + 0.5
        self.low, self.high = low, high
        self.start, self.end = start, end
        self.log = log

    def __call__(self, value: float) -> float:
        position = math.log10(value) if self.log else value
        return self.start + (position - self.low) / (self.high - self.low) * (self.end - self.start)

    def ticks(self, count: int = 5) -> List[float]:
        if self.log:
            first, last = math.ceil(self.low - 1e-9), math.floor(self.high + 1e-9)
            powers = [10.0**e for e in range(first, last + 1)]
            if len(powers) >= 2:
                return powers
            return [10.0**self.low, 10.0**self.high]
        step = (self.high - self.low) / (count - 1)
        return [self.low + i * step for i in range(count)]


class ChartTemplates:
    @staticmethod
    def get_frame_template(context: Dict[str, Any], x_axis: Axis, y_axis: Axis) -> List[str]:
        """Background, title, axes, ticks and axis labels"""
        plot_bottom = HEIGHT - MARGIN_BOTTOM
        plot_right = WIDTH - MARGIN_RIGHT
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
            f'<text x="{WIDTH / 2:.2f}" y="24" text-anchor="middle" font-size="15">{escape(context["title"])}</text>',
            f'<line x1="{MARGIN_LEFT}" y1="{plot_bottom}" x2="{plot_right}" y2="{plot_bottom}" stroke="#000000"/>',
            f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{plot_bottom}" stroke="#000000"/>',
        ]
        if x_axis is not None:
            for tick in x_axis.ticks():
                x = _fmt(x_axis(tick))
                parts.append(f'<line x1="{x}" y1="{plot_bottom}" x2="{x}" y2="{plot_bottom + 5}" stroke="#000000"/>')
                parts.append(
                    f'<text x="{x}" y="{plot_bottom + 18}" text-anchor="middle">{_tick_label(tick)}</text>'
                )
        for tick in y_axis.ticks():
            y = _fmt(y_axis(tick))
            parts.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{y}" x2="{MARGIN_LEFT}" y2="{y}" stroke="#000000"/>')
            parts.append(
                f'<text x="{MARGIN_LEFT - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">'
                f"{_tick_label(tick)}</text>"
            )
        parts.append(
            f'<text x="{(MARGIN_LEFT + plot_right) / 2:.2f}" y="{HEIGHT - 14}" text-anchor="middle">'
            f'{escape(context.get("x_label", ""))}</text>'
        )
        parts.append(
            f'<text x="18" y="{(MARGIN_TOP + plot_bottom) / 2:.2f}" text-anchor="middle" '
            f'transform="rotate(-90 18 {(MARGIN_TOP + plot_bottom) / 2:.2f})">'
            f'{escape(context.get("y_label", ""))}</text>'
        )
        return parts

    @staticmethod
    def get_legend_template(entries: Sequence[Tuple[str, str]]) -> List[str]:
        parts = []
        x = WIDTH - MARGIN_RIGHT + 16
        for position, (label, color) in enumerate(entries):
            y = MARGIN_TOP + 10 + position * 20
            parts.append(f'<rect x="{x}" y="{y - 6}" width="14" height="4" fill="{color}"/>')
            parts.append(f'<text x="{x + 20}" y="{y}" dominant-baseline="middle">{escape(label)}</text>')
        return parts

    @staticmethod
    def get_line_chart_template(context: Dict[str, Any]) -> str:
        """
        Line chart with optional shaded bands.
        context: title, x_label, y_label, x_log, series = [{label, points: [(x, y)], band: [(x, low, high)]}]
        """
        series = context["series"]
        x_log = context.get("x_log", False)
        xs, ys = [], []
        for entry in series:
            xs.extend(x for x, _ in entry["points"])
            ys.extend(y for _, y in entry["points"])
            for x, low, high in entry.get("band", []):
                xs.append(x)
                ys.extend([low, high])
        x_axis = Axis(xs, MARGIN_LEFT, WIDTH - MARGIN_RIGHT, log=x_log)
        y_axis = Axis(ys, HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)

        parts = ChartTemplates.get_frame_template(context, x_axis, y_axis)
        legend = []
        for position, entry in enumerate(series):
            color = entry.get("color") or series_color(entry["label"], position)
            band = [b for b in entry.get("band", []) if not x_log or b[0] > 0]
            if band:
                upper = [f"{_fmt(x_axis(x))},{_fmt(y_axis(high))}" for x, _, high in band]
                lower = [f"{_fmt(x_axis(x))},{_fmt(y_axis(low))}" for x, low, _ in reversed(band)]
                parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2"/>')
            points = [f"{_fmt(x_axis(x))},{_fmt(y_axis(y))}" for x, y in entry["points"] if not x_log or x > 0]
            parts.append(f'<polyline points="{" ".join(points)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            legend.append((entry["label"], color))
        parts.extend(ChartTemplates.get_legend_template(legend))
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    @staticmethod
    def get_bar_chart_template(context: Dict[str, Any]) -> str:
        """
        Bar chart with optional error whiskers.
        context: title, y_label, bars = [{label, value, error}]
        """
        bars = context["bars"]
        values = [0.0] + [bar["value"] + bar.get("error", 0.0) for bar in bars]
        y_axis = Axis(values, HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)
        parts = ChartTemplates.get_frame_template(context, None, y_axis)

        slot = (WIDTH - MARGIN_RIGHT - MARGIN_LEFT) / max(len(bars), 1)
        legend = []
        for position, bar in enumerate(bars):
            color = bar.get("color") or series_color(bar["label"], position)
            left = MARGIN_LEFT + position * slot + slot * 0.2
            top, bottom = y_axis(bar["value"]), y_axis(0.0)
            parts.append(
                f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(slot * 0.6)}" '
                f'height="{_fmt(bottom - top)}" fill="{color}"/>'
            )
            error = bar.get("error", 0.0)
            if error > 0.0:
                center = _fmt(left + slot * 0.3)
                parts.append(
                    f'<line x1="{center}" y1="{_fmt(y_axis(bar["value"] + error))}" x2="{center}" '
                    f'y2="{_fmt(y_axis(max(bar["value"] - error, 0.0)))}" stroke="#000000"/>'
                )
            parts.append(
                f'<text x="{_fmt(left + slot * 0.3)}" y="{HEIGHT - MARGIN_BOTTOM + 18}" '
                f'text-anchor="middle">{escape(bar["label"])}</text>'
            )
            legend.append((bar["label"], color))
        parts.extend(ChartTemplates.get_legend_template(legend))
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


class ChartGenerator:
    @staticmethod
    def generate_chart(context: Dict[str, Any]) -> str:
        """Render the chart named by context['chart_type']"""
        chart_type = context.get("chart_type", "line")
        if chart_type == "bar":
            return ChartTemplates.get_bar_chart_template(context)
        if chart_type == "line":
            return ChartTemplates.get_line_chart_template(context)
        raise ValueError(f"Unknown chart type {chart_type!r}")
