"""Bank of per-mode NUISE filters with floored Bayesian mode probabilities and
aggregate Chi-square anomaly tests."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .estimator import GainVariant, NuiseStepOutput, StateEstimate, StepFailure, nuise_step
from .numerics import IllConditionedError, chi_square_quantile, inv_guarded

__all__ = [
    "AnomalyDecision",
    "BankStepResult",
    "ModeBank",
    "bank_step",
    "update_posteriors",
    "anomaly_score",
    "test_actuator_anomaly",
    "test_sensor_anomaly",
    "DEFAULT_EPSILON",
]

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class AnomalyDecision:
    """Outcome of one aggregate Chi-square test.

    ``decidable`` is False when the covariance could not be inverted; such a
    decision never reports a detection and its score is NaN. ``source`` is
    the index of the mode whose estimate was tested, when run by a bank.
    """

    score: float
    threshold: float
    degrees: int
    detected: bool
    target: str
    decidable: bool = True
    estimate: Optional[np.ndarray] = None
    source: Optional[int] = None


@dataclass(frozen=True)
class BankStepResult:
    outputs: List[Optional[NuiseStepOutput]]
    likelihoods: np.ndarray
    posteriors: np.ndarray
    map_index: int
    map_mode: object
    actuator_decision: Optional[AnomalyDecision]
    sensor_decisions: Dict[str, AnomalyDecision]
    failures: Dict[int, str]

    @property
    def map_output(self):
        return self.outputs[self.map_index]


def update_posteriors(likelihoods, prior, epsilon=DEFAULT_EPSILON):
    """Floored Bayes update ``mu = max(N * mu_prev, eps)`` followed by normalization."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    N = np.asarray(likelihoods, dtype=float)
    mu = np.maximum(N * np.asarray(prior, dtype=float), epsilon)
    return mu / mu.sum()


def anomaly_score(d, P):
    """Quadratic form ``d^T P^-1 d`` with the condition guard on ``P``."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    P_inv = inv_guarded(np.atleast_2d(P), name="anomaly covariance")
    return float(d @ P_inv @ d)


def _decide(d, P, alpha, target, source):
    d = np.atleast_1d(np.asarray(d, dtype=float))
    p = d.size
    threshold = chi_square_quantile(p, alpha)
    try:
        score = anomaly_score(d, P)
    except IllConditionedError:
        return AnomalyDecision(float("nan"), threshold, p, False, target, False, d, source)
    return AnomalyDecision(score, threshold, p, score >= threshold, target, True, d, source)


def test_actuator_anomaly(d_a, P_a, alpha, target="actuator", source=None):
    """Aggregate test over the whole actuator-anomaly vector (no per-actuator split)."""
    return _decide(d_a, P_a, alpha, target, source)


def test_sensor_anomaly(d_s, P_s, alpha, target="sensor", source=None):
    """Aggregate test over one sensor's anomaly block."""
    return _decide(d_s, P_s, alpha, target, source)


# keep pytest from collecting the two test_* helpers above
test_actuator_anomaly.__test__ = False
test_sensor_anomaly.__test__ = False


class ModeBank:
    """Independent NUISE filters, one per mode, with mode probabilities.

    Parameters
    ----------
    modes : list of ModeModel
        All modes must share the state dimension.
    initial : StateEstimate or list of StateEstimate
        Starting estimate, shared by every mode or given per mode.
    posteriors : array_like, optional
        Initial mode probabilities; uniform by default.
    epsilon : float
        Floor applied to the unnormalized mode probabilities.
    alpha : float
        False-alarm level of the Chi-square tests.
    variant : GainVariant

    Notes
    -----
    Not safe to share across threads: :meth:`step` mutates the bank.
    """

    def __init__(self, modes, initial, posteriors=None, epsilon=DEFAULT_EPSILON, alpha=0.01,
                 variant=GainVariant.MINIMUM_VARIANCE):
        self.modes = list(modes)
        if not self.modes:
            raise ValueError("a mode bank needs at least one mode")
        n = self.modes[0].state_dim
        if any(m.state_dim != n for m in self.modes):
            raise ValueError("all modes must share the state dimension")
        if isinstance(initial, StateEstimate):
            initial = [initial] * len(self.modes)
        self.estimates = list(initial)
        if len(self.estimates) != len(self.modes):
            raise ValueError("need one initial estimate per mode")
        if posteriors is None:
            posteriors = np.full(len(self.modes), 1.0 / len(self.modes))
        self.posteriors = np.asarray(posteriors, dtype=float)
        self.posteriors = self.posteriors / self.posteriors.sum()
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.epsilon = float(epsilon)
        self.alpha = float(alpha)
        self.variant = GainVariant(variant)
        self._d_a_prev = [np.zeros(m.d_a_dim) for m in self.modes]

    @property
    def mode_ids(self):
        return [m.mode_id for m in self.modes]

    def step(self, u, readings):
        """Advance every mode with command ``u`` and the current sensor readings.

        ``readings`` maps sensor names to arrays; each mode picks its own
        testing and reference sensors from it.
        """
        outputs, likelihoods, failures = [], np.zeros(len(self.modes)), {}
        for i, mode in enumerate(self.modes):
            z1, z2 = mode.partition(readings)
            try:
                out = nuise_step(mode, self.estimates[i], u, z1, z2, self.variant,
                                 d_a_lin=self._d_a_prev[i])
            except StepFailure as exc:
                logger.warning("mode %r failed at stage %s: %s", mode.mode_id, exc.stage, exc.cause)
                failures[i] = f"{exc.stage}: {exc.cause}"
                outputs.append(None)
                continue
            outputs.append(out)
            likelihoods[i] = out.likelihood
            self.estimates[i] = out.state
            self._d_a_prev[i] = out.d_a
        self.posteriors = update_posteriors(likelihoods, self.posteriors, self.epsilon)
        map_index = int(np.argmax(self.posteriors))
        return BankStepResult(
            outputs=outputs,
            likelihoods=likelihoods,
            posteriors=self.posteriors.copy(),
            map_index=map_index,
            map_mode=self.modes[map_index].mode_id,
            actuator_decision=self._actuator_decision(outputs),
            sensor_decisions=self._sensor_decisions(outputs),
            failures=failures,
        )

    def _best(self, candidates):
        # highest posterior, ties to the lowest index
        return max(candidates, key=lambda i: (self.posteriors[i], -i)) if candidates else None

    def _actuator_decision(self, outputs):
        i = self._best([i for i, m in enumerate(self.modes) if m.d_a_dim and outputs[i] is not None])
        if i is None:
            return None
        return test_actuator_anomaly(outputs[i].d_a, outputs[i].P_a, self.alpha, source=i)

    def _sensor_decisions(self, outputs):
        decisions = {}
        owners = {}
        for i, m in enumerate(self.modes):
            if outputs[i] is None:
                continue
            for name, sl in m.z1_blocks():
                owners.setdefault(name, []).append((i, sl))
        for name, cands in owners.items():
            i = self._best([c[0] for c in cands])
            sl = dict(cands)[i]
            out = outputs[i]
            decisions[name] = test_sensor_anomaly(out.d_s[sl], out.P_s[sl, sl], self.alpha,
                                                  target=f"sensor:{name}", source=i)
        return decisions


def bank_step(bank, u, readings):
    """Functional alias for :meth:`ModeBank.step`."""
    return bank.step(u, readings)
