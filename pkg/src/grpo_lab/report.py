"""Serialization: trajectory CSV, JSON reports and run manifests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from .simulate import Trajectory

CSV_COLUMNS = ("step", "entropy_nats", "phi", "max_arm", "true_arm_prob", "clip_rate", "mean_damage")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return "%.17g" % x


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        cols = (traj.step, traj.entropy, traj.phi, traj.max_arm,
                traj.true_arm_prob, traj.clip_rate, traj.mean_damage)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])
    return path


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with Path(path).open(newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    body = rows[1:]

    def col(i, dtype=float):
        vals = [r[i] for r in body]
        if dtype is int:
            return np.array([int(v) for v in vals], dtype=np.int64)
        return np.array([float(v) if v else math.nan for v in vals])

    return Trajectory(
        step=col(0, int),
        entropy=col(1),
        phi=col(2),
        max_arm=col(3, int),
        true_arm_prob=col(4),
        clip_rate=col(5),
        mean_damage=col(6),
    )


def jsonable(obj):
    """Convert dataclasses and numpy values to JSON types; non-finite floats become strings."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def write_json(data, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
