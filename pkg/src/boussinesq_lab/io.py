"""Persistence: diagnostics CSV, JSON reports and versioned checkpoints.

CSV floats are written with 17 significant digits so values round-trip
exactly. Checkpoints are ``.npz`` archives with little-endian float64 arrays
and a JSON metadata entry carrying the format version and the config hash.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .diagnostics import COLUMNS
from .picard import BoussinesqState

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "boussinesq-lab-checkpoint"
OUT_ENV = "BOUSSINESQ_LAB_OUT"


class CheckpointError(ValueError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def fmt(x) -> str:
    return format(float(x), ".17g")


class CsvStream:
    """Append rows of a fixed column order; the header is written on open."""

    def __init__(self, path, columns=COLUMNS):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)

    def write(self, values):
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} entries, expected {len(self.columns)}")
        self._w.writerow([fmt(v) for v in values])

    def write_record(self, rec):
        self.write(rec.row())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_table(path, rows: list[dict], columns: list[str] | None = None):
    """Write a list of dicts; numbers are formatted losslessly."""
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) if isinstance(r[c], (int, float, np.floating, np.integer))
                        and not isinstance(r[c], bool) else r[c] for c in columns])


def read_csv(path) -> dict:
    """Columns of a numeric CSV as float arrays (empty strings become nan)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    out = {}
    for i, c in enumerate(header):
        out[c] = np.array([float(r[i]) if r[i] != "" else np.nan for r in body], dtype=float)
    return out


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_checkpoint(path, state: BoussinesqState, config_hash: str, T0_steps: int, extra: dict | None = None):
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "time": state.time,
        "time_hex": float(state.time).hex(),
        "T0_steps": int(T0_steps),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            xi=np.ascontiguousarray(state.xi, dtype="<f8"),
            theta=np.ascontiguousarray(state.theta, dtype="<f8"),
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        )
    os.replace(tmp, path)


def load_checkpoint(path, config_hash: str | None = None):
    """Return ``(state, meta)``; the config hash is checked when given."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        xi = z["xi"].astype(np.float64)
        theta = z["theta"].astype(np.float64)
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} is not supported")
    if config_hash is not None and meta["config_hash"] != config_hash:
        raise CheckpointError("checkpoint was written under a different configuration")
    state = BoussinesqState(xi, theta, float.fromhex(meta["time_hex"]))
    return state, meta
