"""Monte-Carlo metrics: estimation error, detection, false alarms and mode identification."""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..numerics import wrap_angle
from .logio import read_log, trial_filename, write_json, write_log
from .simulate import simulate_trial

__all__ = [
    "Summary",
    "TrialMetrics",
    "MetricsReport",
    "MonteCarloError",
    "trial_metrics",
    "summarize",
    "run_monte_carlo",
    "true_mode",
    "build_series",
]

logger = logging.getLogger(__name__)

_COORDS = ("x", "y", "theta")


class MonteCarloError(RuntimeError):
    """Every trial aborted; ``aborted`` holds the per-trial flags and reasons."""

    def __init__(self, message, aborted):
        super().__init__(message)
        self.aborted = aborted


@dataclass(frozen=True)
class Summary:
    """Mean over trials, its standard error (NaN for a single value) and the count."""

    mean: float
    stderr: float
    n: int

    @classmethod
    def of(cls, values):
        v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0)
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        return cls(float(v.mean()), se, int(v.size))


@dataclass
class TrialMetrics:
    seed: int
    aborted: bool
    reason: str
    state_rmse: Dict[str, float]
    anomaly_rmse: Dict[str, float]
    detected: Dict[str, bool]
    delay: Dict[str, Optional[float]]
    false_positive_rate: Dict[str, float]
    mode_id_accuracy: float
    steps: int


@dataclass
class MetricsReport:
    seeds: List[int]
    aborted: List[bool]
    state_rmse: Dict[str, Summary]
    anomaly_rmse: Dict[str, Summary]
    detection_rate: Dict[str, Summary]
    detection_delay: Dict[str, Summary]
    false_positive_rate: Dict[str, Summary]
    mode_id_accuracy: Summary
    trials: List[TrialMetrics] = field(default_factory=list)
    settings: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def true_mode(active_labels):
    """Mode that generated a step: ``nominal``, or the single anomalous component."""
    if not active_labels:
        return "nominal"
    if len(active_labels) == 1:
        return next(iter(active_labels))
    return None


def _window_key(inj):
    return f"{inj.label}@{inj.start_step}-{inj.end_step}"


def _rms(a):
    a = np.asarray(a, dtype=float)
    a = a[np.all(np.isfinite(a), axis=tuple(range(1, a.ndim)))] if a.ndim > 1 else a[np.isfinite(a)]
    return float(np.sqrt(np.mean(a ** 2))) if a.size else float("nan")


def trial_metrics(config, result):
    """Per-trial statistics from one :class:`TrialResult`.

    Row 0 (initial condition) is excluded. A detection counts toward an
    injection only while that injection is active; its delay is the first
    such step minus ``start_step``. False alarms are counted on steps where
    no injection is active. Mode identification is scored on steps at
    least ``burn_in`` steps after the generating mode last changed.
    """
    logs = result.logs[1:]
    sensors = result.sensors
    rmse, an_rmse, detected, delay, fp = {}, {}, {}, {}, {}
    mode_acc = float("nan")
    if logs:
        err = np.array([lg.x_hat - lg.truth for lg in logs])
        err[:, 2] = wrap_angle(err[:, 2])
        rmse = {c: _rms(err[:, j]) for j, c in enumerate(_COORDS)}
        an_rmse["actuator"] = _rms(np.array([lg.d_a_hat - lg.d_a_true for lg in logs]))
        for s in sensors:
            an_rmse[f"sensor:{s}"] = _rms(np.array([lg.d_s_hat[s] - lg.d_s_true[s] for lg in logs]))

        flags = {"actuator": np.array([lg.actuator_detected for lg in logs])}
        for s in sensors:
            flags[f"sensor:{s}"] = np.array([lg.sensor_detected[s] for lg in logs])
        steps = np.array([lg.step for lg in logs])

        for inj in config.injections:
            key = _window_key(inj)
            hit = flags[inj.label] & (steps >= inj.start_step) & (steps < inj.end_step)
            if inj.end_step <= inj.start_step or not np.any((steps >= inj.start_step) & (steps < inj.end_step)):
                continue
            detected[key] = bool(hit.any())
            delay[key] = float(steps[np.argmax(hit)] - inj.start_step) if hit.any() else None

        active = [frozenset(inj.label for inj in config.injections if inj.active(k)) for k in steps]
        clean = np.array([not a for a in active])
        for label, f in flags.items():
            fp[label] = float(f[clean].mean()) if clean.any() else float("nan")

        truth_modes = [true_mode(a) for a in active]
        seg_start, hits, total = 1, 0, 0
        for j, (k, m) in enumerate(zip(steps, truth_modes)):
            if j and m != truth_modes[j - 1]:
                seg_start = k
            if m is None or k - seg_start < config.burn_in:
                continue
            total += 1
            hits += result.mode_ids[logs[j].map_index] == m
        mode_acc = hits / total if total else float("nan")

    return TrialMetrics(
        seed=result.seed,
        aborted=result.aborted,
        reason=result.reason,
        state_rmse=rmse,
        anomaly_rmse=an_rmse,
        detected=detected,
        delay=delay,
        false_positive_rate=fp,
        mode_id_accuracy=mode_acc,
        steps=len(logs),
    )


def _collect(trials, attr):
    keys = []
    for t in trials:
        for k in getattr(t, attr):
            if k not in keys:
                keys.append(k)
    return {k: Summary.of([getattr(t, attr).get(k) for t in trials]) for k in keys}


def summarize(config, per_trial):
    """Aggregate per-trial metrics over the trials that did not abort."""
    ok = [t for t in per_trial if not t.aborted]
    if not ok:
        flags = {t.seed: t.reason for t in per_trial}
        raise MonteCarloError(f"all {len(per_trial)} trials aborted: {flags}", flags)
    rate = {}
    for t in ok:
        for k, v in t.detected.items():
            rate.setdefault(k, []).append(float(v))
    return MetricsReport(
        seeds=[t.seed for t in per_trial],
        aborted=[t.aborted for t in per_trial],
        state_rmse=_collect(ok, "state_rmse"),
        anomaly_rmse=_collect(ok, "anomaly_rmse"),
        detection_rate={k: Summary.of(v) for k, v in rate.items()},
        detection_delay=_collect(ok, "delay"),
        false_positive_rate=_collect(ok, "false_positive_rate"),
        mode_id_accuracy=Summary.of([t.mode_id_accuracy for t in ok]),
        trials=list(per_trial),
        settings={
            "robot": config.robot,
            "sensors": list(config.sensors),
            "steps": config.steps,
            "trials": config.trials,
            "seed": config.seed,
            "alpha": config.alpha,
            "epsilon": config.epsilon,
            "variant": config.variant.value,
            "burn_in": config.burn_in,
            "injections": [
                {"key": _window_key(i), "kind": i.kind, "target": i.target,
                 "magnitude": list(i.magnitude), "start_step": i.start_step, "end_step": i.end_step}
                for i in config.injections
            ],
        },
    )


def run_monte_carlo(config, out_dir=None):
    """Run ``config.trials`` independent trials with seeds ``seed + i``.

    With ``out_dir`` each trial log is written as ``trial_NNNN.csv`` and the
    report as ``report.json``.
    """
    if config.trials < 1:
        raise ValueError("trials must be at least 1")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    per_trial = []
    for i in range(config.trials):
        result = simulate_trial(config, config.seed + i)
        if out_dir is not None:
            write_log(out_dir / trial_filename(i), result.logs, result.mode_ids, result.sensors)
        per_trial.append(trial_metrics(config, result))
    report = summarize(config, per_trial)
    if out_dir is not None:
        write_json(out_dir / "report.json", report.to_dict())
    return report


def build_series(log_paths):
    """Per-step means over trial logs, for plotting.

    Returns the column names and a list of rows: step, trial count, RMS
    state error per coordinate, mean posterior per mode and the fraction of
    trials flagging each test target.
    """
    tables = [read_log(p) for p in log_paths]
    if not tables:
        return [], []
    cols = tables[0][0]
    mu_cols = [c for c in cols if c.startswith("mu_")]
    det_cols = ["act_detected"] + [c for c in cols if c.startswith("detected_")]
    by_step = {}
    for _, rows in tables:
        for r in rows[1:]:
            by_step.setdefault(int(r["step"]), []).append(r)
    header = ["step", "trials"] + [f"rms_err_{c}" for c in _COORDS] + [f"mean_{c}" for c in mu_cols]
    header += [f"frac_{c}" for c in det_cols]
    out = []
    for k in sorted(by_step):
        rows = by_step[k]
        e = np.array([[float(r[f"xhat_{c}"]) - float(r[f"true_{c}"]) for c in _COORDS] for r in rows])
        e[:, 2] = wrap_angle(e[:, 2])
        line = [k, len(rows)]
        line += [float(np.sqrt(np.nanmean(e[:, j] ** 2))) if np.isfinite(e[:, j]).any() else float("nan")
                 for j in range(3)]
        line += [float(np.mean([float(r[c]) for r in rows])) for c in mu_cols]
        line += [float(np.mean([r[c] == "1" for r in rows])) for c in det_cols]
        out.append(line)
    return header, out
