"""
Experiment Runner Module
- Runs independent seeded replicas of one or more training configurations.
- A failing replica is logged and recorded without stopping its siblings.
"""

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

import settings
from dataset_service import LabeledImageSet, load_dataset
from training_service import FINAL_SNAPSHOT, HISTORY_FILE, TrainConfig, train

MANIFEST_FILE = "suite_manifest.json"

STATUS_COMPLETED = "COMPLETED"
STATUS_FAILED = "FAILED"


@dataclass
class RunRecord:
    name: str
    replica: int
    seed: int
    status: str
    out_dir: str
    history_path: Optional[str] = None
    snapshot_path: Optional[str] = None
    final_accuracy: Optional[float] = None
    error: Optional[str] = None
    master_seed: Optional[int] = None


def replica_seeds(master_seed: int, replicas: int) -> List[int]:
    """Distinct, reproducible run seeds spawned from one master seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(master_seed).spawn(replicas)]


def _run_replica(
    config: TrainConfig,
    replica: int,
    seed: int,
    out_dir: str,
    master_seed: int,
    train_set: Optional[LabeledImageSet] = None,
    test_set: Optional[LabeledImageSet] = None,
) -> RunRecord:
    run_dir = os.path.join(out_dir, config.name, f"replica_{replica:02d}")
    record = RunRecord(
        name=config.name, replica=replica, seed=seed, status=STATUS_FAILED, out_dir=run_dir, master_seed=master_seed
    )
    try:
        _, history = train(config.with_seed(seed), train_set, test_set, out_dir=run_dir, origin=(master_seed, replica))
        record.status = STATUS_COMPLETED
        record.history_path = os.path.join(run_dir, HISTORY_FILE)
        record.snapshot_path = os.path.join(run_dir, FINAL_SNAPSHOT)
        record.final_accuracy = history.accuracy[-1]
        logging.info(f"Replica {replica} of {config.name} completed with accuracy {record.final_accuracy:.4f}")
    except Exception as e:
        logging.error(f"Replica {replica} of {config.name} failed: {e}")
        logging.error(traceback.format_exc())
        record.error = f"{type(e).__name__}: {e}"
    return record


def write_manifest(records: Sequence[RunRecord], out_dir: str) -> str:
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "w") as handle:
        json.dump([asdict(record) for record in records], handle, indent=2, sort_keys=True)
    return path


def read_manifest(out_dir: str) -> List[RunRecord]:
    with open(os.path.join(out_dir, MANIFEST_FILE), "r") as handle:
        return [RunRecord(**entry) for entry in json.load(handle)]


def run_experiment_suite(
    configs: Sequence[TrainConfig],
    replicas: int,
    out_dir: Optional[str] = None,
    master_seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> List[RunRecord]:
    """
    Train `replicas` seeded instances of every configuration and persist their outputs.
    :param configs: Configurations to run; names must be distinct.
    :param replicas: Instances per configuration.
    :param master_seed: Seed the replica seeds are spawned from, defaults to each config's seed.
    :param workers: Parallel worker processes, defaults to SPARSE_DST_WORKERS.
    :return: One record per replica, in (config, replica) order.
    """
    if replicas < 1:
        raise ValueError(f"replicas must be at least 1, got {replicas}")
    out_dir = out_dir or settings.OUTPUT_ROOT
    workers = settings.WORKERS if workers is None else workers
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    for config in configs:
        master = config.seed if master_seed is None else master_seed
        seeds = replica_seeds(master, replicas)
        jobs.extend((config, replica, seed, master) for replica, seed in enumerate(seeds))
    logging.info(f"Running {len(jobs)} replicas of {len(configs)} configurations with {workers} workers")

    records: List[RunRecord] = []
    if workers > 1:
        # each worker process loads its own copy of the data
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_replica, config, replica, seed, out_dir, master)
                for config, replica, seed, master in jobs
            ]
            for (config, replica, seed, master), future in zip(jobs, futures):
                try:
                    records.append(future.result())
                except Exception as e:
                    logging.error(f"Worker for replica {replica} of {config.name} crashed: {e}")
                    records.append(
                        RunRecord(
                            name=config.name,
                            replica=replica,
                            seed=seed,
                            status=STATUS_FAILED,
                            out_dir=os.path.join(out_dir, config.name, f"replica_{replica:02d}"),
                            error=f"{type(e).__name__}: {e}",
                            master_seed=master,
                        )
                    )
    else:
        datasets = {}
        for config, replica, seed, master in jobs:
            key = (config.dataset, config.data_root, config.strict_splits)
            if key not in datasets:
                try:
                    datasets[key] = load_dataset(config.dataset, config.data_root, strict=config.strict_splits)
                except Exception as e:
                    logging.error(f"Could not load dataset {config.dataset}: {e}")
                    datasets[key] = (None, None)
            train_set, test_set = datasets[key]
            records.append(_run_replica(config, replica, seed, out_dir, master, train_set, test_set))

    failed = [record for record in records if record.status == STATUS_FAILED]
    manifest = write_manifest(records, out_dir)
    logging.info(f"Suite finished: {len(records) - len(failed)} completed, {len(failed)} failed, manifest {manifest}")
    return records
