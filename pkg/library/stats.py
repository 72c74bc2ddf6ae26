import csv
import json
import math
import os
from typing import Iterable, List, Optional, Sequence, Tuple

import bitmath
import numpy as np
import psutil

from library.errors import InvalidInputError
from library.log import logger

METRICS_FILE = "metrics.jsonl"


class Memory:
    @staticmethod
    def rss() -> int:
        return psutil.Process().memory_info().rss


def human_size(num_bytes: int) -> str:
    return bitmath.Byte(num_bytes).best_prefix().format("{value:.1f} {unit}")


def process_memory() -> str:
    return human_size(Memory.rss())


def read_metrics(run_dir: str) -> List[dict]:
    path = os.path.join(run_dir, METRICS_FILE)
    if not os.path.isfile(path):
        raise InvalidInputError(f"run directory {run_dir} has no {METRICS_FILE}")
    with open(path, "r") as stream:
        try:
            return [json.loads(line) for line in stream if line.strip()]
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{path}: unreadable metrics line ({e})")


def cv_curve(records: Iterable[dict]) -> List[Tuple[int, float]]:
    return [(int(r["epoch"]), float(r["cv_loss"])) for r in records]


def epochs_to_target(curve: Sequence[Tuple[int, float]], target: float) -> Optional[int]:
    """ First epoch whose value is at or below target, None if never reached """
    for epoch, value in curve:
        if value <= target:
            return epoch
    return None


def first_epoch_below(records: Iterable[dict], key: str, threshold: float) -> Optional[int]:
    for record in records:
        value = record.get(key)
        if value is not None and value < threshold:
            return int(record["epoch"])
    return None


def aggregate(values: Iterable[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    """ (mean, population std) over the values that are present """
    present = [v for v in values if v is not None and not math.isnan(v)]
    if not present:
        return None, None
    return float(np.mean(present)), float(np.std(present))


def convergence_report(run_dirs: Sequence[str], reference: int = 0):
    """
    Aligned per-epoch CV-loss table plus a per-run summary. The target loss is the
    minimum CV loss of the reference run; the ratio column compares each run's
    epochs-to-target against the reference run's.
    Returns (header, rows, summary_header, summary_rows).
    """
    if not run_dirs:
        raise InvalidInputError("no run directories given")
    if not 0 <= reference < len(run_dirs):
        raise InvalidInputError(f"reference index {reference} out of range for {len(run_dirs)} runs")
    curves = [cv_curve(read_metrics(run_dir)) for run_dir in run_dirs]
    if not curves[reference]:
        raise InvalidInputError(f"reference run {run_dirs[reference]} has no epochs")
    target = min(value for _, value in curves[reference])
    epochs = sorted({epoch for curve in curves for epoch, _ in curve})
    header = ["epoch"] + [os.path.basename(os.path.normpath(d)) or d for d in run_dirs]
    rows = []
    for epoch in epochs:
        row = [epoch]
        for curve in curves:
            values = dict(curve)
            row.append("" if epoch not in values else f"{values[epoch]:.6f}")
        rows.append(row)

    reference_epochs = epochs_to_target(curves[reference], target)
    summary_header = ["run", "epochs_to_target", "final_cv_loss", "ratio_to_reference"]
    summary = []
    for run_dir, name, curve in zip(run_dirs, header[1:], curves):
        reached = epochs_to_target(curve, target)
        ratio = "" if reached is None or not reference_epochs else f"{reached / reference_epochs:.3f}"
        final = f"{curve[-1][1]:.6f}" if curve else ""
        summary.append([name, "" if reached is None else reached, final, ratio])
    logger.info(f"Convergence target {target:.6f} (min CV loss of {header[1 + reference]})")
    return header, rows, summary_header, summary


def write_csv(path: str, header: Sequence, rows: Iterable[Sequence]):
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
