"""
Analysis Service Module
- Weight-magnitude density estimates of trained networks.
- Median, percentile, mean and std aggregation of accuracy curves across runs.
- Report emission: summary CSV tables and SVG charts.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from errors import AnalysisError, EmptyNetwork, GridMismatch, ReportError
from report_templates import ChartGenerator
from sparse_network import Network

DEFAULT_DENSITY_BINS = 200
REPORT_DIR = "report"
SUMMARY_FIELDS = ["median", "p40", "p60", "mean", "std"]


@dataclass
class DensityEstimate:
    bin_edges: np.ndarray
    density: np.ndarray
    scope: str = "pooled"

    @property
    def bin_widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2.0

    def integral(self) -> float:
        return float(np.sum(self.density * self.bin_widths))


@dataclass
class DensityDip:
    minimum_at: float
    minimum: float
    maximum_at: float
    maximum: float


@dataclass
class CurveSummary:
    grid: np.ndarray
    median: np.ndarray
    p40: np.ndarray
    p60: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    runs: int = 1


def weight_density(net: Network, bins: int = DEFAULT_DENSITY_BINS, layer: Optional[int] = None) -> DensityEstimate:
    """
    Histogram density of |w| over the sparse layers, integrating to one.
    Bins are log-spaced over the observed range when every magnitude is positive.
    :param layer: 1-based sparse layer to restrict to; all layers are pooled when omitted.
    """
    if layer is None:
        layers, scope = net.layers, "pooled"
    else:
        if not 1 <= layer <= len(net.layers):
            raise AnalysisError(f"Layer {layer} outside 1..{len(net.layers)}")
        layers, scope = [net.layers[layer - 1]], f"layer{layer}"

    magnitudes = np.abs(np.concatenate([sparse.weights for sparse in layers]))
    return magnitude_density(magnitudes, bins, scope)


def magnitude_density(
    magnitudes: np.ndarray, bins: int = DEFAULT_DENSITY_BINS, scope: str = "pooled"
) -> DensityEstimate:
    """Density estimate of precomputed |w| values, e.g. pooled over several snapshots."""
    magnitudes = np.abs(np.asarray(magnitudes, dtype=np.float64))
    if magnitudes.size == 0:
        raise EmptyNetwork("No sparse weights to estimate a density from")
    if bins < 2:
        raise AnalysisError(f"A density estimate needs at least 2 bins, got {bins}")

    low, high = float(magnitudes.min()), float(magnitudes.max())
    if high == low:
        span = max(abs(low), 1.0) * 1e-3
        edges = np.linspace(low, low + span, bins + 1)
    elif low > 0.0:
        edges = np.geomspace(low, high, bins + 1)
    else:
        edges = np.linspace(low, high, bins + 1)

    density, edges = np.histogram(magnitudes, bins=edges, density=True)
    return DensityEstimate(bin_edges=edges, density=density, scope=scope)


def find_density_dip(estimate: DensityEstimate, upper: float = 0.1, smooth: int = 1) -> Optional[DensityDip]:
    """
    Local minimum of the density below `upper`, followed by the global maximum.
    :param smooth: Width of a moving average applied before the search.
    :return: None when the density only rises or only falls below the maximum.
    """
    density = estimate.density
    if smooth > 1:
        density = np.convolve(density, np.ones(smooth) / smooth, mode="same")
    centers = estimate.centers
    peak = int(np.argmax(density))

    candidates = np.flatnonzero((centers < upper) & (np.arange(len(centers)) < peak))
    if len(candidates) == 0:
        return None
    low = int(candidates[np.argmin(density[candidates])])
    if not np.any(density[:low] > density[low]):
        return None
    return DensityDip(float(centers[low]), float(density[low]), float(centers[peak]), float(density[peak]))


def aggregate_curves(runs, grid: Optional[Sequence[float]] = None) -> CurveSummary:
    """
    Per-grid-point median, 40th/60th percentile, mean and std over runs.
    :param runs: Value sequences aligned to `grid`, or (grid, values) pairs.
    :param grid: Shared grid for plain value sequences, defaults to 1..n.
    """
    runs = list(runs)
    if not runs:
        raise GridMismatch("Nothing to aggregate")

    columns = []
    for run in runs:
        if isinstance(run, tuple):
            run_grid, values = np.asarray(run[0], dtype=np.float64), np.asarray(run[1], dtype=np.float64)
            if grid is None:
                grid = run_grid
            elif not np.array_equal(np.asarray(grid, dtype=np.float64), run_grid):
                raise GridMismatch("Runs are measured on different grids")
        else:
            values = np.asarray(run, dtype=np.float64)
        columns.append(values)

    lengths = {len(values) for values in columns}
    if len(lengths) != 1:
        raise GridMismatch(f"Runs have different lengths {sorted(lengths)}")
    length = lengths.pop()
    grid = np.arange(1, length + 1, dtype=np.float64) if grid is None else np.asarray(grid, dtype=np.float64)
    if len(grid) != length:
        raise GridMismatch(f"Grid of {len(grid)} points for runs of length {length}")

    stacked = np.vstack(columns)
    return CurveSummary(
        grid=grid,
        median=np.median(stacked, axis=0),
        p40=np.percentile(stacked, 40, axis=0),
        p60=np.percentile(stacked, 60, axis=0),
        mean=stacked.mean(axis=0),
        std=stacked.std(axis=0),
        runs=len(columns),
    )


def aggregate_histories(histories: Sequence) -> CurveSummary:
    """Accuracy-per-epoch summary of several TrainingHistory objects."""
    return aggregate_curves([history.accuracy for history in histories])


def _render_csv(table: pd.DataFrame) -> str:
    return table.to_csv(index=False, lineterminator="\n")


def _summary_csv(grid_name: str, summaries: Mapping[str, CurveSummary]) -> str:
    frames = [
        pd.DataFrame(
            {"label": label, grid_name: summary.grid, **{name: getattr(summary, name) for name in SUMMARY_FIELDS}}
        )
        for label, summary in summaries.items()
    ]
    return _render_csv(pd.concat(frames, ignore_index=True))


def _density_csv(estimates: Mapping[str, DensityEstimate]) -> str:
    frames = [
        pd.DataFrame(
            {
                "label": label,
                "scope": estimate.scope,
                "bin_left": estimate.bin_edges[:-1],
                "bin_right": estimate.bin_edges[1:],
                "density": estimate.density,
            }
        )
        for label, estimate in estimates.items()
    ]
    return _render_csv(pd.concat(frames, ignore_index=True))


def _summary_series(summaries: Mapping[str, CurveSummary]) -> List[dict]:
    return [
        {
            "label": label,
            "points": list(zip(summary.grid.tolist(), summary.median.tolist())),
            "band": list(zip(summary.grid.tolist(), summary.p40.tolist(), summary.p60.tolist())),
        }
        for label, summary in summaries.items()
    ]


def render_report(
    histories: Mapping[str, Sequence],
    curves: Mapping[str, Sequence],
    densities: Mapping[str, DensityEstimate],
) -> Dict[str, str]:
    """
    Render every report file in memory.
    :param histories: Label (e.g. strategy) -> TrainingHistory objects of its runs.
    :param curves: Label -> RobustnessCurve objects, at most one per perturbation kind.
    :param densities: Label -> DensityEstimate.
    :return: File name -> text content.
    """
    files: Dict[str, str] = {}
    histories = {label: runs for label, runs in sorted(histories.items()) if runs}
    densities = dict(sorted(densities.items()))

    if histories:
        accuracy = {label: aggregate_histories(runs) for label, runs in histories.items()}
        files["accuracy.csv"] = _summary_csv("epoch", accuracy)
        files["accuracy.svg"] = ChartGenerator.generate_chart(
            {
                "chart_type": "line",
                "title": "Test accuracy",
                "x_label": "epoch",
                "y_label": "accuracy",
                "x_log": True,
                "series": _summary_series(accuracy),
            }
        )

        run_means = pd.DataFrame(
            [(label, run.mean_update_seconds()) for label, runs in histories.items() for run in runs],
            columns=["label", "update_seconds"],
        )
        timing = (
            run_means.groupby("label", sort=True)["update_seconds"]
            .agg(runs="count", mean_update_seconds="mean", std_update_seconds=lambda s: s.std(ddof=0))
            .reset_index()
        )
        bars = [
            {"label": row.label, "value": float(row.mean_update_seconds), "error": float(row.std_update_seconds)}
            for row in timing.itertuples()
        ]
        files["update_timing.csv"] = _render_csv(timing)
        files["update_timing.svg"] = ChartGenerator.generate_chart(
            {"chart_type": "bar", "title": "Topology update duration", "y_label": "seconds", "bars": bars}
        )

    by_kind: Dict[str, Dict[str, CurveSummary]] = {}
    for label, label_curves in sorted(curves.items()):
        for curve in label_curves:
            by_kind.setdefault(curve.kind.value, {})[label] = curve.summary()
    for kind, summaries in sorted(by_kind.items()):
        files[f"robustness_{kind}.csv"] = _summary_csv("intensity", summaries)
        files[f"robustness_{kind}.svg"] = ChartGenerator.generate_chart(
            {
                "chart_type": "line",
                "title": f"Robustness: {kind}",
                "x_label": "intensity",
                "y_label": "accuracy",
                "series": _summary_series(summaries),
            }
        )

    if densities:
        files["weight_density.csv"] = _density_csv(densities)
        files["weight_density.svg"] = ChartGenerator.generate_chart(
            {
                "chart_type": "line",
                "title": "Weight magnitude density",
                "x_label": "|w|",
                "y_label": "density",
                "x_log": all(estimate.bin_edges[0] > 0 for estimate in densities.values()),
                "series": [
                    {"label": label, "points": list(zip(estimate.centers.tolist(), estimate.density.tolist()))}
                    for label, estimate in densities.items()
                ],
            }
        )
    return files


def emit_report(
    histories: Mapping[str, Sequence],
    curves: Mapping[str, Sequence],
    densities: Mapping[str, DensityEstimate],
    out_dir: str,
) -> List[str]:
    """
    Write the report under <out_dir>/report. Nothing is written when rendering fails,
    and files already written are removed when a write fails.
    :return: Written paths.
    """
    if not any(histories.values()) and not any(curves.values()) and not densities:
        raise ReportError("Nothing to report: no histories, curves or densities given")
    files = render_report(histories, curves, densities)

    report_dir = os.path.join(out_dir, REPORT_DIR)
    written: List[str] = []
    partial = None
    try:
        os.makedirs(report_dir, exist_ok=True)
        for name, content in files.items():
            path = os.path.join(report_dir, name)
            partial = path + ".part"
            with open(partial, "w", newline="") as handle:
                handle.write(content)
            os.replace(partial, path)
            written.append(path)
            partial = None
    except OSError as e:
        for path in written + ([partial] if partial else []):
            if os.path.exists(path):
                os.remove(path)
        raise ReportError(f"Could not write report to {report_dir}: {e}") from e

    logging.info(f"Report written: {len(written)} files in {report_dir}")
    return written


def read_summary_csv(path: str) -> Dict[str, CurveSummary]:
    """Read accuracy.csv or robustness_<kind>.csv back into summaries."""
    table = pd.read_csv(path, float_precision="round_trip", dtype={"label": str})
    grid_name = table.columns[1]
    return {
        str(label): CurveSummary(
            grid=rows[grid_name].to_numpy(dtype=np.float64),
            **{name: rows[name].to_numpy(dtype=np.float64) for name in SUMMARY_FIELDS},
        )
        for label, rows in table.groupby("label", sort=False)
    }


def read_density_csv(path: str) -> Dict[str, DensityEstimate]:
    table = pd.read_csv(path, float_precision="round_trip", dtype={"label": str})
    return {
        str(label): DensityEstimate(
            bin_edges=np.append(rows["bin_left"].to_numpy(dtype=np.float64), rows["bin_right"].iloc[-1]),
            density=rows["density"].to_numpy(dtype=np.float64),
            scope=str(rows["scope"].iloc[0]),
        )
        for label, rows in table.groupby("label", sort=False)
    }


def read_timing_csv(path: str) -> Dict[str, dict]:
    table = pd.read_csv(path, float_precision="round_trip", dtype={"label": str})
    return table.set_index("label").to_dict(orient="index")


def write_density_csv(estimates: Mapping[str, DensityEstimate], path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(_density_csv(dict(sorted(estimates.items()))))
    return path
