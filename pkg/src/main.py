"""
Main Module
- Command-line entry point: dataset fetching, training suites, robustness sweeps,
  weight densities and report generation.
"""

import argparse
import glob
import logging
import os
import sys
import traceback
from typing import Dict, List, Optional

import numpy as np

import settings
from analysis_service import DEFAULT_DENSITY_BINS, emit_report, magnitude_density, weight_density, write_density_csv
from dataset_service import DATASETS, fetch_dataset, load_dataset
from experiment_runner import STATUS_FAILED, run_experiment_suite
from robustness_service import DEFAULT_REPLICAS, PerturbationKind, RobustnessCurve, sweep_snapshots, write_curve
from snapshot_service import list_snapshots, load_snapshot, load_snapshot_with_metadata
from training_service import HISTORY_FILE, TrainConfig, TrainingHistory


def parse_grid(text: str) -> List[float]:
    try:
        return [float(value) for value in text.split(",") if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Grid must be a comma-separated list of numbers, got {text!r}")


def fetch_data(dataset: str, root: Optional[str], mirror: Optional[str]) -> int:
    paths = fetch_dataset(dataset, root=root, mirror_url=mirror)
    logging.info(f"{dataset}: {len(paths)} files ready")
    return 0


def train_suite(config_paths: List[str], replicas: int, out_dir: Optional[str], master_seed, workers) -> int:
    configs = [TrainConfig.from_file(path) for path in config_paths]
    records = run_experiment_suite(configs, replicas, out_dir=out_dir, master_seed=master_seed, workers=workers)
    failed = [record for record in records if record.status == STATUS_FAILED]
    for record in failed:
        logging.error(f"{record.name} replica {record.replica} (seed {record.seed}) failed: {record.error}")
    return 1 if failed else 0


def robustness(
    snapshot: str,
    kind: str,
    grid: List[float],
    replicas: int,
    dataset: str,
    root: Optional[str],
    out_dir: str,
    seed: int,
    test_limit: Optional[int],
) -> int:
    _, test_set = load_dataset(dataset, root)
    test_set = test_set.head(test_limit)
    paths = list_snapshots(snapshot)
    logging.info(f"Robustness sweep {kind} over {len(paths)} snapshots, grid {grid}")
    curve = sweep_snapshots(paths, kind, grid, replicas, test_set, seed=seed)
    for path in write_curve(curve, out_dir):
        logging.info(f"Wrote {path}")
    return 0


def _snapshot_label(metadata: Dict, path: str) -> str:
    return metadata.get("strategy") or os.path.basename(os.path.dirname(os.path.abspath(path)))


def collect_report_inputs(in_dir: str, bins: int = DEFAULT_DENSITY_BINS):
    """
    Gather histories, robustness curves and final-snapshot densities below a directory.
    Histories and snapshots are grouped by regrowth strategy, curves by their directory name.
    Update durations come from each run's topology log when its history carries none.
    """
    histories: Dict[str, List[TrainingHistory]] = {}
    for path in sorted(glob.glob(os.path.join(in_dir, "**", HISTORY_FILE), recursive=True)):
        history = TrainingHistory.from_run_dir(os.path.dirname(path))
        label = history.metadata.get("strategy", history.metadata.get("name", "run"))
        histories.setdefault(label, []).append(history)

    curves: Dict[str, List[RobustnessCurve]] = {}
    for path in sorted(glob.glob(os.path.join(in_dir, "**", "robustness_*.csv"), recursive=True)):
        if path.endswith("_summary.csv") or f"{os.sep}report{os.sep}" in path:
            continue
        label = os.path.basename(os.path.dirname(os.path.abspath(path)))
        curves.setdefault(label, []).append(RobustnessCurve.from_csv(path))

    magnitudes: Dict[str, List[np.ndarray]] = {}
    for path in sorted(glob.glob(os.path.join(in_dir, "**", "final.npz"), recursive=True)):
        net, metadata = load_snapshot_with_metadata(path)
        magnitudes.setdefault(_snapshot_label(metadata, path), []).extend(layer.weights for layer in net.layers)
    densities = {label: magnitude_density(np.concatenate(parts), bins) for label, parts in magnitudes.items()}
    return histories, curves, densities


def report(in_dir: str, out_dir: str, bins: int) -> int:
    histories, curves, densities = collect_report_inputs(in_dir, bins)
    written = emit_report(histories, curves, densities, out_dir)
    logging.info(f"Report: {len(written)} files")
    return 0


def density(snapshot: str, out_dir: str, bins: int, layer: Optional[int]) -> int:
    estimates = {}
    for path in list_snapshots(snapshot):
        label = os.path.relpath(path, snapshot) if os.path.isdir(snapshot) else os.path.basename(path)
        estimates[label] = weight_density(load_snapshot(path), bins, layer)
    path = write_density_csv(estimates, os.path.join(out_dir, "weight_density.csv"))
    logging.info(f"Wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dynamic sparse training and robustness experiments.")
    parser.add_argument("--log-level", type=str, default=None, help="Log level (default: SPARSE_DST_LOG_LEVEL).")
    commands = parser.add_subparsers(dest="command", required=True)

    fetch = commands.add_parser("fetch-data", help="Download and verify a dataset.")
    fetch.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    fetch.add_argument("--root", default=None, help="Data directory (default: SPARSE_DST_DATA_ROOT).")
    fetch.add_argument("--mirror", default=None, help="Mirror URL overriding the manifest.")

    train = commands.add_parser("train", help="Train seeded replicas of one or more configurations.")
    train.add_argument("--config", required=True, nargs="+", help="JSON TrainConfig file(s).")
    train.add_argument("--replicas", type=int, default=1)
    train.add_argument("--out", default=None, help="Output directory (default: SPARSE_DST_OUTPUT_ROOT).")
    train.add_argument("--master-seed", type=int, default=None, help="Seed the replica seeds derive from.")
    train.add_argument("--workers", type=int, default=None, help="Worker processes (default: SPARSE_DST_WORKERS).")

    robust = commands.add_parser("robustness", help="Sweep accuracy under a perturbation.")
    robust.add_argument("--snapshot", required=True, help="Snapshot file or directory of snapshots.")
    robust.add_argument("--kind", required=True, choices=[kind.value for kind in PerturbationKind])
    robust.add_argument("--grid", required=True, type=parse_grid, help="Comma-separated intensities.")
    robust.add_argument("--replicas", type=int, default=DEFAULT_REPLICAS)
    robust.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    robust.add_argument("--root", default=None)
    robust.add_argument("--out", required=True)
    robust.add_argument("--seed", type=int, default=0)
    robust.add_argument("--test-limit", type=int, default=None, help="Evaluate on the first N test samples.")

    rep = commands.add_parser("report", help="Aggregate runs and sweeps into CSV and SVG files.")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--bins", type=int, default=DEFAULT_DENSITY_BINS)

    dens = commands.add_parser("density", help="Weight magnitude density of snapshots.")
    dens.add_argument("--snapshot", required=True)
    dens.add_argument("--out", required=True)
    dens.add_argument("--bins", type=int, default=DEFAULT_DENSITY_BINS)
    dens.add_argument("--layer", type=int, default=None, help="1-based sparse layer (default: pooled).")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(level=args.log_level)
    try:
        if args.command == "fetch-data":
            return fetch_data(args.dataset, args.root, args.mirror)
        if args.command == "train":
            return train_suite(args.config, args.replicas, args.out, args.master_seed, args.workers)
        if args.command == "robustness":
            return robustness(
                args.snapshot,
                args.kind,
                args.grid,
                args.replicas,
                args.dataset,
                args.root,
                args.out,
                args.seed,
                args.test_limit,
            )
        if args.command == "report":
            return report(args.in_dir, args.out, args.bins)
        return density(args.snapshot, args.out, args.bins, args.layer)
    except Exception as e:
        logging.error(f"Error in {args.command}: {e}")
        logging.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
