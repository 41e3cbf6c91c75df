"""Per-trial CSV step logs and the JSON metrics summary.

A trial log starts with a ``# nuise-log format_version=N`` comment line,
then a header row and one row per step, columns in the fixed order given by
:func:`log_columns`. Floats are written with ``repr`` so they read back
bit-exactly. Row 0 holds the initial condition (truth and initial estimate).
"""
import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from ..robots import sensor_dim
from .config import FORMAT_VERSION

__all__ = [
    "LogFormatError",
    "log_columns",
    "estimate_columns",
    "log_rows",
    "write_log",
    "read_log",
    "recorded_stream",
    "write_json",
    "read_json",
    "trial_filename",
]

_HEADER_RE = re.compile(r"^# nuise-log format_version=(\d+)\s*$")
_STATE = ("x", "y", "theta")


class LogFormatError(ValueError):
    """A log file does not follow the documented layout."""


def trial_filename(index):
    return f"trial_{index:04d}.csv"


def estimate_columns(mode_ids, sensors):
    """Columns produced by the estimator (identical under replay)."""
    cols = [f"mu_{m}" for m in mode_ids]
    cols += ["map_mode"]
    cols += [f"xhat_{c}" for c in _STATE]
    cols += [f"Pdiag_{c}" for c in _STATE]
    cols += ["da_hat_0", "da_hat_1", "act_score", "act_detected"]
    for s in sensors:
        cols += [f"ds_hat_{s}_{i}" for i in range(sensor_dim(s))]
    for s in sensors:
        cols += [f"score_{s}", f"detected_{s}"]
    cols += [f"lik_{m}" for m in mode_ids]
    cols += ["failures"]
    return cols


def log_columns(mode_ids, sensors):
    cols = ["step"]
    cols += [f"true_{c}" for c in _STATE]
    cols += ["u_0", "u_1", "da_true_0", "da_true_1"]
    for s in sensors:
        cols += [f"ds_true_{s}_{i}" for i in range(sensor_dim(s))]
    for s in sensors:
        cols += [f"z_{s}_{i}" for i in range(sensor_dim(s))]
    return cols + estimate_columns(mode_ids, sensors)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def log_rows(logs, mode_ids, sensors):
    """Yield each :class:`StepLog` as a list of strings in column order."""
    for lg in logs:
        row = [str(lg.step)]
        row += [_fmt(v) for v in lg.truth]
        row += [_fmt(v) for v in lg.u]
        row += [_fmt(v) for v in lg.d_a_true]
        for s in sensors:
            row += [_fmt(v) for v in lg.d_s_true[s]]
        for s in sensors:
            row += [_fmt(v) for v in lg.readings[s]]
        row += [_fmt(v) for v in lg.posteriors]
        row += [str(mode_ids[lg.map_index])]
        row += [_fmt(v) for v in lg.x_hat]
        row += [_fmt(v) for v in lg.P_diag]
        row += [_fmt(v) for v in lg.d_a_hat]
        row += [_fmt(lg.actuator_score), _fmt(lg.actuator_detected)]
        for s in sensors:
            row += [_fmt(v) for v in lg.d_s_hat[s]]
        for s in sensors:
            row += [_fmt(lg.sensor_scores[s]), _fmt(lg.sensor_detected[s])]
        row += [_fmt(v) for v in lg.likelihoods]
        row += [lg.failures]
        yield row


def write_log(path, logs, mode_ids, sensors):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# nuise-log format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(log_columns(mode_ids, sensors))
        w.writerows(log_rows(logs, mode_ids, sensors))
    return path


def read_log(path):
    """Return ``(columns, rows)`` with rows as dicts of raw strings."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise LogFormatError(f"{path}: cannot read log: {exc.strerror}") from None
    with fh:
        first = fh.readline()
        m = _HEADER_RE.match(first)
        if not m:
            raise LogFormatError(f"{path}:1: missing '# nuise-log format_version=' header")
        if int(m.group(1)) != FORMAT_VERSION:
            raise LogFormatError(f"{path}:1: unsupported format_version {m.group(1)}")
        reader = csv.reader(fh)
        try:
            cols = next(reader)
        except StopIteration:
            raise LogFormatError(f"{path}:2: missing column header") from None
        rows = []
        for lineno, r in enumerate(reader, start=3):
            if len(r) != len(cols):
                raise LogFormatError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(r)}")
            rows.append(dict(zip(cols, r)))
    if not rows:
        raise LogFormatError(f"{path}: log has no rows")
    return cols, rows


def recorded_stream(rows, sensors):
    """Initial estimate and ``(step, u, readings)`` tuples from log rows."""
    first = rows[0]
    if int(first["step"]) != 0:
        raise LogFormatError("the first row must be step 0 (initial condition)")
    x0 = np.array([float(first[f"xhat_{c}"]) for c in _STATE])
    stream = []
    for r in rows[1:]:
        u = np.array([float(r["u_0"]), float(r["u_1"])])
        readings = {
            s: np.array([float(r[f"z_{s}_{i}"]) for i in range(sensor_dim(s))]) for s in sensors
        }
        stream.append((int(r["step"]), u, readings))
    return x0, stream


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data):
    path = Path(path)
    payload = {"format_version": FORMAT_VERSION, **_jsonable(data)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def read_json(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise LogFormatError(f"{path}: unsupported format_version {data.get('format_version')!r}")
    return data
