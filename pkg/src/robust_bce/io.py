"""CSV and JSON readers/writers for observations, trajectories, labels and traces.

Floats are written with ``repr`` so a write/read cycle is exact and two runs
with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch
from .model import Observation, StateTrajectory

METADATA_COLUMNS = ("elevation_deg", "azimuth_deg", "signal_strength_dbhz")


def _fmt(x) -> str:
    return repr(float(x))


def _vector(values) -> str:
    return ";".join(_fmt(v) for v in np.atleast_1d(values))


def _parse_vector(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split(";")], dtype=np.float64)


def write_observations(path, observations: Sequence[Observation], dim: int | None = None) -> None:
    """Write ``epoch,kind,value,beacon_x,beacon_y[,beacon_z],<metadata>``.

    Prior and between rows leave the beacon fields empty; their vector value
    is stored semicolon-separated in the ``value`` field.  Missing metadata
    entries are written as empty fields.
    """
    if dim is None:
        dims = {len(o.beacon) for o in observations if o.beacon is not None}
        if len(dims) > 1:
            raise DimensionMismatch(f"beacons of mixed dimension {sorted(dims)}")
        dim = dims.pop() if dims else 2
    axes = ["beacon_x", "beacon_y", "beacon_z"][:dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "kind", "value", *axes, *METADATA_COLUMNS])
        for o in observations:
            beacon = [_fmt(v) for v in o.beacon] if o.beacon is not None else [""] * dim
            if len(beacon) != dim:
                raise DimensionMismatch(f"beacon of dimension {len(beacon)} in a {dim}D file")
            meta = [_fmt(o.metadata[k]) if k in o.metadata else "" for k in METADATA_COLUMNS]
            w.writerow([o.epoch_index, o.kind, _vector(o.value), *beacon, *meta])


def read_observations(path) -> list[Observation]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        axes = [a for a in ("beacon_x", "beacon_y", "beacon_z") if a in fields]
        out = []
        for row in reader:
            beacon = None
            if all(row[a] != "" for a in axes) and axes:
                beacon = [float(row[a]) for a in axes]
            meta = {k: float(row[k]) for k in METADATA_COLUMNS if k in row and row[k] != ""}
            value = _parse_vector(row["value"])
            out.append(Observation(int(row["epoch"]), row["kind"], value, beacon=beacon, metadata=meta))
    return out


def write_trajectory(path, X: StateTrajectory) -> None:
    """``epoch,x,y[,z],bias`` with one row per epoch."""
    axes = ["x", "y", "z"][: X.state_dim - 1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *axes, "bias"])
        for e, row in enumerate(X.values):
            w.writerow([e, *(_fmt(v) for v in row)])


def read_trajectory(path) -> StateTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r[1:]] for r in reader]
    return StateTrajectory(np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1))


def write_labels(path, labels: Iterable[bool]) -> None:
    """``index,degraded`` with 0/1 flags aligned to the observation file rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "degraded"])
        for i, flag in enumerate(labels):
            w.writerow([i, int(bool(flag))])


def read_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([bool(int(r["degraded"])) for r in csv.DictReader(fh)], dtype=bool)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_json(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Generic CSV writer; floats go through ``repr``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
