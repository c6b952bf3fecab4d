"""Plain-text array container: one CSV per 2D array plus a JSON sidecar.

Rows are grid nodes, columns are time points or ensemble members. Floats
are written with ``repr`` so a round trip through disk is bit-exact. The
sidecar records name, units, shape, axis labels, an optional mask file,
the seed that produced the array, and the repository version string.
"""
from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["ArrayRecord", "save_array", "load_array", "git_describe"]


def git_describe(cwd: str | Path | None = None) -> str:
    """Best-effort repository version string; 'unknown' outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=str(cwd) if cwd else None)
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() or "unknown"


@dataclass
class ArrayRecord:
    """A named 2D array with its provenance metadata."""

    name: str
    values: np.ndarray          # (n_nodes, n_columns)
    units: str
    row_axis: str = "node"
    column_axis: str = "time"
    column_labels: list | None = None
    mask_file: str | None = None
    seed: int | None = None
    version: str = field(default_factory=git_describe)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"{self.name}: expected a 2D array, "
                             f"got shape {self.values.shape}")
        if self.column_labels is not None and \
                len(self.column_labels) != self.values.shape[1]:
            raise ValueError(f"{self.name}: {len(self.column_labels)} column "
                             f"labels for {self.values.shape[1]} columns")


def save_array(record: ArrayRecord, out_dir: str | Path) -> Path:
    """Write ``<name>.csv`` and ``<name>.json`` under out_dir; returns the
    CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{record.name}.csv"

    labels = record.column_labels
    if labels is None:
        labels = [f"{record.column_axis}_{j}"
                  for j in range(record.values.shape[1])]
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([record.row_axis] + [str(l) for l in labels])
        for i, row in enumerate(record.values):
            writer.writerow([i] + [repr(float(v)) for v in row])

    sidecar = {
        "name": record.name,
        "units": record.units,
        "shape": list(record.values.shape),
        "row_axis": record.row_axis,
        "column_axis": record.column_axis,
        "column_labels": [str(l) for l in labels],
        "mask_file": record.mask_file,
        "seed": record.seed,
        "version": record.version,
    }
    with open(out_dir / f"{record.name}.json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    return csv_path


def load_array(csv_path: str | Path) -> ArrayRecord:
    """Read an array container back; inverse of save_array."""
    csv_path = Path(csv_path)
    with open(csv_path.with_suffix(".json")) as f:
        meta = json.load(f)
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    values = np.array(rows, dtype=float)
    expected = tuple(meta["shape"])
    if values.shape != expected:
        raise ValueError(f"{meta['name']}: CSV shape {values.shape} does not "
                         f"match sidecar {expected}")
    return ArrayRecord(
        name=meta["name"], values=values, units=meta["units"],
        row_axis=meta["row_axis"], column_axis=meta["column_axis"],
        column_labels=header[1:], mask_file=meta.get("mask_file"),
        seed=meta.get("seed"), version=meta.get("version", "unknown"))
