"""Closed-loop simulation of a robot under injected anomalies, feeding the mode bank."""
import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..bank import ModeBank
from ..estimator import StateEstimate
from ..numerics import wrap_angle
from ..robots import (
    DomainError,
    khepera_f,
    khepera_h_ips,
    khepera_h_lidar,
    make_mode_set,
    sensor_dim,
    tamiya_f,
)

__all__ = [
    "StepLog",
    "TrialResult",
    "NoiseStream",
    "GeometryViolation",
    "make_bank",
    "make_controller",
    "simulate_trial",
    "replay",
]

logger = logging.getLogger(__name__)


class GeometryViolation(RuntimeError):
    """The true robot left the walled arena."""


@dataclass
class StepLog:
    """One step of one trial. Step 0 holds the initial condition only."""

    step: int
    truth: np.ndarray
    u: np.ndarray
    d_a_true: np.ndarray
    d_s_true: Dict[str, np.ndarray]
    readings: Dict[str, np.ndarray]
    posteriors: np.ndarray
    map_index: int
    x_hat: np.ndarray
    P_diag: np.ndarray
    d_a_hat: np.ndarray
    actuator_score: float
    actuator_detected: bool
    d_s_hat: Dict[str, np.ndarray]
    sensor_scores: Dict[str, float]
    sensor_detected: Dict[str, bool]
    likelihoods: np.ndarray
    failures: str = ""


@dataclass
class TrialResult:
    seed: int
    logs: List[StepLog]
    mode_ids: List[str]
    sensors: tuple
    aborted: bool = False
    reason: str = ""
    initial_estimate: Optional[np.ndarray] = None


class NoiseStream:
    """Zero-mean Gaussian draws from a dedicated counter-based generator.

    Each named source gets its own Philox stream keyed on the trial seed and
    the source name, so draws of one source never depend on another.
    """

    def __init__(self, trial_seed, name, cov, enabled=True):
        key = np.random.SeedSequence([int(trial_seed), zlib.crc32(name.encode())])
        self.rng = np.random.Generator(np.random.Philox(key))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        self.factor = V * np.sqrt(np.maximum(w, 0.0))
        self.enabled = enabled

    def draw(self):
        n = self.factor.shape[0]
        if not self.enabled:
            return np.zeros(n)
        return self.factor @ self.rng.standard_normal(n)


def make_bank(config, initial_x):
    modes = make_mode_set(config.robot, config.params, config.noise, config.sensors)
    return ModeBank(
        modes,
        StateEstimate(initial_x, config.P0),
        epsilon=config.epsilon,
        alpha=config.alpha,
        variant=config.variant,
    )


class _OpenLoop:
    def __init__(self, schedule):
        self.bounds = np.cumsum([n for n, _ in schedule])
        self.controls = [np.asarray(u, dtype=float) for _, u in schedule]

    def __call__(self, k, estimate):
        i = int(np.searchsorted(self.bounds, k, side="right"))
        return self.controls[min(i, len(self.controls) - 1)].copy()


class _Waypoint:
    """Proportional heading control toward the next waypoint, from the MAP estimate."""

    def __init__(self, cfg, robot, params):
        self.cfg, self.robot, self.params = cfg, robot, params
        self.index = 0

    def __call__(self, k, estimate):
        wps = self.cfg.waypoints
        x, y, th = estimate
        tx, ty = wps[self.index % len(wps)]
        if np.hypot(tx - x, ty - y) < self.cfg.tolerance:
            self.index += 1
            tx, ty = wps[self.index % len(wps)]
        err = float(wrap_angle(np.arctan2(ty - y, tx - x) - th))
        omega = self.cfg.gain * err
        v = self.cfg.speed
        if self.robot == "khepera":
            half_diff = 0.5 * omega * self.params.heading_denominator
            return np.array([v - half_diff, v + half_diff])
        steer = np.clip(np.arctan(omega * self.params.L / v), -self.cfg.max_steer, self.cfg.max_steer)
        return np.array([v, steer])


def make_controller(config):
    c = config.controller
    if c.type == "open-loop":
        return _OpenLoop(c.schedule)
    return _Waypoint(c, config.robot, config.params)


def _dynamics(config):
    return khepera_f if config.robot == "khepera" else tamiya_f


def _measure(config, name, x):
    if name == "lidar":
        return khepera_h_lidar(x, config.params)
    return khepera_h_ips(x)


def _inside_arena(config, x):
    walls = np.asarray(config.params.walls)
    dist = walls[:, 0] - x[0] * np.cos(walls[:, 1]) - x[1] * np.sin(walls[:, 1])
    return bool(np.all(dist > 0.0))


def _injected(config, k):
    d_a = np.zeros(2)
    d_s = {s: np.zeros(sensor_dim(s)) for s in config.sensors}
    for inj in config.injections:
        if not inj.active(k):
            continue
        if inj.kind == "actuator":
            if inj.target == "all":
                d_a = d_a + inj.magnitude
            else:
                d_a[inj.target] += inj.magnitude[0]
        else:
            d_s[inj.target] = d_s[inj.target] + inj.magnitude
    return d_a, d_s


def _nan(n):
    return np.full(n, np.nan)


def _bank_record(k, result, bank, sensors):
    """Estimator-side fields of a step log (shared by simulation and replay)."""
    i = result.map_index
    est = bank.estimates[i]
    act = result.actuator_decision
    d_a_hat = _nan(2) if act is None else np.asarray(act.estimate, dtype=float)
    d_s_hat, scores, detected = {}, {}, {}
    for s in sensors:
        dec = result.sensor_decisions.get(s)
        d_s_hat[s] = _nan(sensor_dim(s)) if dec is None else np.asarray(dec.estimate, dtype=float)
        scores[s] = np.nan if dec is None else dec.score
        detected[s] = False if dec is None else bool(dec.detected)
    return dict(
        step=k,
        posteriors=result.posteriors.copy(),
        map_index=i,
        x_hat=est.x.copy(),
        P_diag=np.diag(est.P).copy(),
        d_a_hat=d_a_hat,
        actuator_score=np.nan if act is None else act.score,
        actuator_detected=False if act is None else bool(act.detected),
        d_s_hat=d_s_hat,
        sensor_scores=scores,
        sensor_detected=detected,
        likelihoods=result.likelihoods.copy(),
        failures=";".join(f"{bank.modes[j].mode_id}={msg}" for j, msg in result.failures.items()),
    )


def _initial_record(config, bank, truth, x_hat):
    n_modes = len(bank.modes)
    return StepLog(
        step=0,
        truth=truth,
        u=_nan(2),
        d_a_true=np.zeros(2),
        d_s_true={s: np.zeros(sensor_dim(s)) for s in config.sensors},
        readings={s: _nan(sensor_dim(s)) for s in config.sensors},
        posteriors=bank.posteriors.copy(),
        map_index=int(np.argmax(bank.posteriors)),
        x_hat=x_hat.copy(),
        P_diag=np.diag(config.P0).copy(),
        d_a_hat=_nan(2),
        actuator_score=np.nan,
        actuator_detected=False,
        d_s_hat={s: _nan(sensor_dim(s)) for s in config.sensors},
        sensor_scores={s: np.nan for s in config.sensors},
        sensor_detected={s: False for s in config.sensors},
        likelihoods=_nan(n_modes),
    )


def simulate_trial(config, trial_seed):
    """Simulate one trial and run the mode bank on its readings.

    Deterministic in ``(config, trial_seed)``. A trial whose true pose leaves
    the arena stops at that step and is returned with ``aborted=True``.
    """
    on = config.sample_noise
    init_noise = NoiseStream(trial_seed, "initial-estimate", config.P0, on)
    process = NoiseStream(trial_seed, "process", config.noise.Q, on)
    sensor_noise = {
        s: NoiseStream(trial_seed, f"sensor:{s}", config.noise.sensor_cov(s), on) for s in config.sensors
    }
    f = _dynamics(config)
    controller = make_controller(config)

    x = np.asarray(config.initial_pose, dtype=float).copy()
    x_hat0 = x + init_noise.draw()
    x_hat0[2] = wrap_angle(x_hat0[2])
    bank = make_bank(config, x_hat0)
    logs = [_initial_record(config, bank, x.copy(), x_hat0)]
    result = TrialResult(trial_seed, logs, [str(m) for m in bank.mode_ids], tuple(config.sensors),
                         initial_estimate=x_hat0.copy())
    if not _inside_arena(config, x):
        result.aborted, result.reason = True, "initial pose outside the arena"
        return result

    for k in range(1, config.steps + 1):
        u = controller(k - 1, bank.estimates[int(np.argmax(bank.posteriors))].x)
        d_a, d_s = _injected(config, k)
        try:
            x = f(x, u, d_a, config.params) + process.draw()
        except DomainError as exc:
            result.aborted, result.reason = True, f"step {k}: {exc}"
            break
        x[2] = wrap_angle(x[2])
        if not _inside_arena(config, x):
            result.aborted, result.reason = True, f"step {k}: robot left the arena"
            logger.warning("trial %d aborted: %s", trial_seed, result.reason)
            break
        readings = {s: _measure(config, s, x) + sensor_noise[s].draw() + d_s[s] for s in config.sensors}
        step_result = bank.step(u, readings)
        logs.append(StepLog(
            truth=x.copy(),
            u=np.asarray(u, dtype=float).copy(),
            d_a_true=d_a,
            d_s_true=d_s,
            readings=readings,
            **_bank_record(k, step_result, bank, config.sensors),
        ))
    return result


def replay(config, initial_estimate, stream):
    """Run the mode bank over recorded ``(step, u, readings)`` tuples.

    No ground truth is needed; truth and injection fields of the returned
    logs are NaN.
    """
    x_hat0 = np.asarray(initial_estimate, dtype=float)
    bank = make_bank(config, x_hat0)
    logs = [_initial_record(config, bank, _nan(3), x_hat0)]
    logs[0].d_a_true = _nan(2)
    logs[0].d_s_true = {s: _nan(sensor_dim(s)) for s in config.sensors}
    for k, u, readings in stream:
        step_result = bank.step(u, readings)
        logs.append(StepLog(
            truth=_nan(3),
            u=np.asarray(u, dtype=float),
            d_a_true=_nan(2),
            d_s_true={s: _nan(sensor_dim(s)) for s in config.sensors},
            readings=readings,
            **_bank_record(k, step_result, bank, config.sensors),
        ))
    return logs
