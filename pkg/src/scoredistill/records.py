"""Persistence for run records: CSV rows, JSON round trip and SVG curves.

CSV column order (fixed)::

    iter, particle, phase, s, t, estimator, camera, grad_norm, x0_gap, mode_dist,
    x0_hat_0 .. x0_hat_{d-1}, theta_0 .. theta_{d-1}

Floats are written with 17 significant digits so values survive a text round trip.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .harness import SCALAR_COLUMNS, VECTOR_COLUMNS, RunRecord, empty_columns, windowed_variance

FORMATS = ("csv", "json", "svg")
_STRING_COLUMNS = ("phase", "estimator")
_INT_COLUMNS = ("iter", "particle", "s", "t", "camera")


def csv_header(dim: int) -> list[str]:
    return list(SCALAR_COLUMNS) + [f"{name}_{i}" for name in VECTOR_COLUMNS for i in range(dim)]


def _fmt(value) -> str:
    if isinstance(value, (str, np.str_)):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % value


def _open(path: Path, mode: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open(mode, newline="" if "w" in mode else None)
    except OSError as exc:
        raise OSError(f"cannot open {path}: {exc}") from exc


def _write_csv(record: RunRecord, path: Path):
    cols = record.columns
    with _open(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(record.dim))
        for i in range(record.n_rows):
            row = [_fmt(cols[k][i]) for k in SCALAR_COLUMNS]
            for k in VECTOR_COLUMNS:
                row.extend(_fmt(v) for v in cols[k][i])
            writer.writerow(row)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)       # "nan", "inf"
    if isinstance(value, (np.floating, np.integer)):
        return _jsonable(value.item())
    return value


def record_to_dict(record: RunRecord) -> dict:
    return {
        "config": record.config,
        "config_hash": record.config_hash,
        "dim": record.dim,
        "failed": record.failed,
        "failure": record.failure,
        "wall_time": record.wall_time,
        "metrics": {k: _jsonable(v) for k, v in record.metrics.items()},
        "columns": {k: np.asarray(v).tolist() for k, v in record.columns.items()},
    }


def _metric_from_json(value):
    return float(value) if value in ("nan", "inf", "-inf") else value


def record_from_dict(data: dict) -> RunRecord:
    dim = int(data["dim"])
    cols = empty_columns(dim)
    for k, v in data["columns"].items():
        if k not in cols:
            raise ConfigurationError(f"unknown record column {k!r}")
        if not v:
            continue
        if k in _STRING_COLUMNS:
            cols[k] = np.asarray(v, dtype="<U10")
        elif k in _INT_COLUMNS:
            cols[k] = np.asarray(v, dtype=np.int64)
        else:
            cols[k] = np.asarray(v, dtype=np.float64)
    return RunRecord(
        config=data["config"],
        config_hash=data["config_hash"],
        dim=dim,
        columns=cols,
        metrics={k: _metric_from_json(v) for k, v in data["metrics"].items()},
        failed=bool(data["failed"]),
        failure=data["failure"],
        wall_time=float(data.get("wall_time", 0.0)),
    )


def _write_json(record: RunRecord, path: Path):
    with _open(path, "w") as fh:
        # repr-exact floats: json uses the shortest round-tripping representation
        json.dump(record_to_dict(record), fh)


def load_record(path) -> RunRecord:
    path = Path(path)
    try:
        with path.open() as fh:
            return record_from_dict(json.load(fh))
    except OSError as exc:
        raise OSError(f"cannot read record {path}: {exc}") from exc


def _write_svg(record: RunRecord, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.fonttype"] = "none"     # keep labels as text
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    if record.n_iters:
        iters = np.arange(record.n_iters)
        ax1.plot(iters, record.per_iteration("mode_dist").mean(axis=1), label="mode_distance")
        window = int(record.config.get("metrics_window", 20))
        if record.n_iters >= window:
            var = windowed_variance(record, window)
            ax2.plot(iters[window - 1:], var, color="tab:orange", label="guidance_variance")
        else:
            ax2.plot([], [], color="tab:orange", label="guidance_variance")
    else:
        ax1.plot([], [], label="mode_distance")
        ax2.plot([], [], color="tab:orange", label="guidance_variance")
    ax1.set_ylabel("mode distance")
    ax2.set_ylabel("x0 window variance")
    ax2.set_xlabel("iteration")
    for ax in (ax1, ax2):
        ax.legend()
    ax1.set_title(f"{record.config.get('estimator', '')} {record.config_hash[:10]}")
    fig.tight_layout()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def emit(record: RunRecord, fmt: str, path) -> Path:
    path = Path(path)
    writers = {"csv": _write_csv, "json": _write_json, "svg": _write_svg}
    if fmt not in writers:
        raise ConfigurationError(f"unknown format {fmt!r}; choose from {FORMATS}")
    writers[fmt](record, path)
    return path
