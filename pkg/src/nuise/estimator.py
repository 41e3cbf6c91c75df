"""Single-mode NUISE step: joint state, actuator-anomaly and sensor-anomaly estimation.

One call to :func:`nuise_step` runs the full recursion for one mode

1. estimate the actuator anomaly from the reference-sensor residual with the
   Gauss-Markov gain ``M2`` (constrained so that ``M2 C2 G = I``),
2. predict the state with the anomaly compensated input,
3. correct the prediction with the reference sensors,
4. estimate the testing-sensor anomaly from the corrected state,
5. score the mode with the (possibly degenerate) Gaussian likelihood of the
   reference innovation.

The model is linearized once per step. ``A``, ``B`` and ``G`` are taken at the
previous estimate, ``C1`` and ``C2`` at the anomaly-free prediction, which keeps
``M2 C2 G = I`` exact within the step.
"""
import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .numerics import (
    CovarianceError,
    IllConditionedError,
    factor_covariance,
    gaussian_likelihood,
    inv_guarded,
    pinv_psd,
    repair_covariance,
    symmetrize,
    wrap_angle,
)

__all__ = [
    "GainVariant",
    "ModeModel",
    "StateEstimate",
    "Linearization",
    "NuiseStepOutput",
    "NuiseError",
    "EvaluationError",
    "UnidentifiableAnomalyError",
    "SingularUpdateError",
    "StepFailure",
    "numerical_jacobian",
    "linearize",
    "estimate_actuator_anomaly",
    "predict_state",
    "update_state",
    "estimate_sensor_anomaly",
    "mode_likelihood",
    "nuise_step",
    "INNOVATION_RANK_RTOL",
]

# Zero-eigenvalue cutoff for the innovation covariance, relative to the size
# of the terms it is assembled from. The covariance is structurally singular
# whenever an actuator anomaly is estimated, and cancellation leaves residues
# far above the default eps-level cutoff.
INNOVATION_RANK_RTOL = 1e-9


class GainVariant(enum.Enum):
    """Choice of state-correction gain.

    ``MINIMUM_VARIANCE`` uses the cross-covariance ``P C2^T - G M2 R2`` between
    the prediction error and the innovation, consistent with the innovation
    covariance used for the likelihood. ``VERBATIM`` reproduces the original
    NUISE correction lines as stated, whose cross terms carry the opposite
    sign; it is kept for regression pinning.
    """

    MINIMUM_VARIANCE = "minimum-variance"
    VERBATIM = "verbatim"


class NuiseError(RuntimeError):
    """Base class for filter failures."""


class EvaluationError(NuiseError):
    """A model function returned non-finite values."""

    def __init__(self, msg, coordinate=None):
        super().__init__(msg)
        self.coordinate = coordinate


class UnidentifiableAnomalyError(NuiseError):
    """The reference sensors cannot separate some actuator-anomaly direction."""


class SingularUpdateError(NuiseError):
    """The verbatim-gain denominator could not be inverted."""


class StepFailure(NuiseError):
    """Wraps a failure inside :func:`nuise_step` with the stage it occurred in."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _as_tuple(idx):
    return tuple(int(i) for i in idx)


@dataclass(frozen=True, eq=False)
class ModeModel:
    """One hypothesis about the system: dynamics, sensor partition and noise.

    Parameters
    ----------
    mode_id : hashable
        Identifier reported by the mode bank.
    f : callable
        ``f(x, u, d) -> x_next``; ``d`` has length ``d_a_dim``.
    h1, h2 : callable
        Testing- and reference-sensor measurement functions of the state.
    Q, R1, R2 : ndarray
        Process, testing-sensor and reference-sensor noise covariances.
    d_a_dim : int
        Number of actuator-anomaly channels estimated by this mode.
    jac_f : callable, optional
        ``jac_f(x, u, d) -> (A, B, G)``. Finite differences otherwise.
    jac_h1, jac_h2 : callable, optional
        ``jac(x) -> C``. Finite differences otherwise.
    x_angles, z1_angles, z2_angles : tuple of int
        Indices of angular components. Residuals in those components are
        wrapped to (-pi, pi]; state angles are wrapped in the mean only.
    testing, reference : tuple of str
        Sensor names stacked (in order) into ``z1`` and ``z2`` by
        :meth:`partition`.
    sensor_dims : mapping
        Length of each named sensor's reading.
    """

    mode_id: object
    f: Callable
    h1: Callable
    h2: Callable
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    d_a_dim: int = 0
    jac_f: Optional[Callable] = None
    jac_h1: Optional[Callable] = None
    jac_h2: Optional[Callable] = None
    x_angles: tuple = ()
    z1_angles: tuple = ()
    z2_angles: tuple = ()
    testing: tuple = ()
    reference: tuple = ()
    sensor_dims: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for name in ("Q", "R1", "R2"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.size == 0:
                M = np.zeros((0, 0))
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if M.size and np.linalg.eigvalsh(M)[0] < -1e-12 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be positive semi-definite")
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        if self.d_a_dim < 0:
            raise ValueError("d_a_dim must be nonnegative")
        if self.d_a_dim > 0:
            if self.d_a_dim > self.R2.shape[0]:
                raise ValueError("d_a_dim cannot exceed the reference-sensor dimension")
            if np.linalg.eigvalsh(self.R2)[0] <= 0.0:
                raise ValueError("R2 must be positive definite when actuator anomalies are estimated")
        for name in ("x_angles", "z1_angles", "z2_angles", "testing", "reference"):
            val = getattr(self, name)
            conv = _as_tuple(val) if name.endswith("angles") else tuple(val)
            object.__setattr__(self, name, conv)
        object.__setattr__(self, "sensor_dims", dict(self.sensor_dims))

    @property
    def state_dim(self):
        return self.Q.shape[0]

    @property
    def z1_dim(self):
        return self.R1.shape[0]

    @property
    def z2_dim(self):
        return self.R2.shape[0]

    def partition(self, readings):
        """Stack named sensor readings into ``(z1, z2)`` for this mode."""

        def stack(names):
            if not names:
                return np.zeros(0)
            return np.concatenate([np.atleast_1d(np.asarray(readings[n], dtype=float)) for n in names])

        return stack(self.testing), stack(self.reference)

    def z1_blocks(self):
        """``[(sensor_name, slice_into_z1), ...]`` for each testing sensor."""
        if not self.testing:
            return [("z1", slice(0, self.z1_dim))] if self.z1_dim else []
        blocks, start = [], 0
        for name in self.testing:
            n = self.sensor_dims.get(name, self.z1_dim if len(self.testing) == 1 else None)
            if n is None:
                raise ValueError(f"sensor_dims lacks an entry for {name!r}")
            blocks.append((name, slice(start, start + n)))
            start += n
        return blocks


@dataclass(frozen=True)
class StateEstimate:
    """State mean ``x`` with error covariance ``P``."""

    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape != (x.size, x.size):
            raise ValueError(f"covariance shape {P.shape} does not match state length {x.size}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C1: np.ndarray
    C2: np.ndarray


@dataclass(frozen=True)
class NuiseStepOutput:
    """Everything one filter iteration produces for one mode."""

    state: StateEstimate
    predicted: StateEstimate
    d_a: np.ndarray
    P_a: np.ndarray
    d_s: np.ndarray
    P_s: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray
    likelihood: float
    M2: np.ndarray
    L: np.ndarray
    linearization: Linearization


def _finite(v, what):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise EvaluationError(f"{what} returned non-finite value at index {bad[0]}", int(bad[0]))
    return v


def _wrap_components(v, idx):
    if idx:
        v = v.copy()
        v[list(idx)] = wrap_angle(v[list(idx)])
    return v


def numerical_jacobian(fun, x, angles=(), what="function"):
    """Central-difference Jacobian of ``fun`` at ``x``.

    The step for coordinate ``i`` is ``max(1e-6, 1e-6 * |x_i|)``. Differences
    of the output components listed in ``angles`` are wrapped so that a
    wrapped heading does not produce a spurious jump.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y0 = _finite(fun(x), what)
    J = np.empty((y0.size, x.size))
    for i in range(x.size):
        h = max(1e-6, 1e-6 * abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        try:
            yp = _finite(fun(xp), what)
            ym = _finite(fun(xm), what)
        except EvaluationError as exc:
            raise EvaluationError(f"{what} non-finite while perturbing coordinate {i}", i) from exc
        J[:, i] = _wrap_components(yp - ym, angles) / (2.0 * h)
    return J


def linearize(model, x, u, d_a, x_pred=None):
    """Jacobians of the mode's dynamics and measurement functions.

    ``A``, ``B`` and ``G`` are evaluated at ``(x, u, d_a)``; ``C1`` and ``C2``
    at ``x_pred``, which defaults to ``f(x, u, d_a)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d_a = np.asarray(d_a, dtype=float).reshape(model.d_a_dim)
    if x_pred is None:
        x_pred = _finite(model.f(x, u, d_a), "f")
    if model.jac_f is not None:
        A, B, G = (np.atleast_2d(np.asarray(J, dtype=float)) for J in model.jac_f(x, u, d_a))
        G = G.reshape(x.size, model.d_a_dim)
    else:
        ang = model.x_angles
        A = numerical_jacobian(lambda v: model.f(v, u, d_a), x, ang, "f")
        B = numerical_jacobian(lambda v: model.f(x, v, d_a), u, ang, "f")
        if model.d_a_dim:
            G = numerical_jacobian(lambda v: model.f(x, u, v), d_a, ang, "f")
        else:
            G = np.zeros((x.size, 0))
    if model.jac_h1 is not None:
        C1 = np.asarray(model.jac_h1(x_pred), dtype=float).reshape(model.z1_dim, x.size)
    elif model.z1_dim:
        C1 = numerical_jacobian(model.h1, x_pred, model.z1_angles, "h1")
    else:
        C1 = np.zeros((0, x.size))
    if model.jac_h2 is not None:
        C2 = np.asarray(model.jac_h2(x_pred), dtype=float).reshape(model.z2_dim, x.size)
    elif model.z2_dim:
        C2 = numerical_jacobian(model.h2, x_pred, model.z2_angles, "h2")
    else:
        C2 = np.zeros((0, x.size))
    return Linearization(A, B, G, C1, C2)


def estimate_actuator_anomaly(model, prev, u, z2, d_a_lin=None):
    """Gauss-Markov estimate of the actuator anomaly acting over the last interval.

    Parameters
    ----------
    model : ModeModel
    prev : StateEstimate
        Posterior from the previous step.
    u : array_like
        Commanded input over the last interval.
    z2 : array_like
        Current reference-sensor readings.
    d_a_lin : array_like, optional
        Anomaly value to linearize about (zero by default). The estimate is
        ``d_a_lin + M2 (z2 - h2(f(x, u, d_a_lin)))``; for a linear model
        this is independent of ``d_a_lin``.

    Returns
    -------
    d_a, P_a, M2, lin
        Estimate, its error covariance, the gain and the step linearization.
        With ``d_a_dim == 0`` the estimate is empty and ``M2`` has zero rows.

    Raises
    ------
    UnidentifiableAnomalyError
        ``G^T C2^T (R2*)^-1 C2 G`` is singular or ill-conditioned.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))
    q = model.d_a_dim
    d_lin = np.zeros(q) if d_a_lin is None else np.asarray(d_a_lin, dtype=float).reshape(q)
    x_star = _finite(model.f(prev.x, u, d_lin), "f")
    lin = linearize(model, prev.x, u, d_lin, x_pred=x_star)
    if q == 0:
        return np.zeros(0), np.zeros((0, 0)), np.zeros((0, model.z2_dim)), lin

    A, G, C2 = lin.A, lin.G, lin.C2
    P_tilde = A @ prev.P @ A.T + model.Q
    R_star = symmetrize(C2 @ P_tilde @ C2.T + model.R2)
    try:
        R_star_inv = inv_guarded(R_star, name="reference residual covariance")
        CG = C2 @ G
        F = CG.T @ R_star_inv @ CG
        F_inv = inv_guarded(F, name="anomaly information matrix")
    except IllConditionedError as exc:
        raise UnidentifiableAnomalyError(str(exc)) from exc
    M2 = F_inv @ CG.T @ R_star_inv
    resid = _wrap_components(z2 - _finite(model.h2(x_star), "h2"), model.z2_angles)
    d_a = d_lin + M2 @ resid
    P_a = symmetrize(M2 @ R_star @ M2.T)
    return d_a, P_a, M2, lin


def predict_state(model, prev, u, d_a, M2, lin):
    """Anomaly-compensated state prediction and its error covariance."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d_a = np.asarray(d_a, dtype=float).reshape(model.d_a_dim)
    x = _wrap_components(_finite(model.f(prev.x, u, d_a), "f"), model.x_angles)
    n = x.size
    GM = lin.G @ M2
    Pi = np.eye(n) - GM @ lin.C2
    A_bar = Pi @ lin.A
    Q_bar = Pi @ model.Q @ Pi.T + GM @ model.R2 @ GM.T
    P = symmetrize(A_bar @ prev.P @ A_bar.T + Q_bar)
    return StateEstimate(x, P)


def _innovation(model, prior, z2, M2, lin):
    """Reference innovation, its covariance and the covariance's factorization."""
    nu = _wrap_components(
        np.atleast_1d(np.asarray(z2, dtype=float)) - _finite(model.h2(prior.x), "h2"),
        model.z2_angles,
    )
    C2, R2 = lin.C2, model.R2
    CPC = C2 @ prior.P @ C2.T
    cross = C2 @ lin.G @ M2 @ R2
    scale = float(np.linalg.norm(CPC) + np.linalg.norm(R2) + 2.0 * np.linalg.norm(cross))
    P_bar, fac = factor_covariance(CPC + R2 - cross - cross.T, scale=scale,
                                   tol=INNOVATION_RANK_RTOL * scale, name="innovation covariance")
    return nu, P_bar, fac


def _update(model, prior, nu, fac, M2, lin, variant):
    C2, R2, P = lin.C2, model.R2, prior.P
    n = prior.x.size
    GMR = lin.G @ M2 @ R2
    if variant is GainVariant.MINIMUM_VARIANCE:
        S = P @ C2.T - GMR
        P_bar_pinv = pinv_psd(fac)
        L = S @ P_bar_pinv
        P_post = repair_covariance(
            P - S @ P_bar_pinv @ S.T, scale=float(np.linalg.norm(P)), name="posterior covariance"
        )
    elif variant is GainVariant.VERBATIM:
        R_tilde = C2 @ P @ C2.T + R2 + C2 @ GMR + GMR.T @ C2.T
        try:
            R_tilde_inv = inv_guarded(R_tilde, name="gain denominator")
        except IllConditionedError as exc:
            raise SingularUpdateError(str(exc)) from exc
        L = (C2 @ P + GMR.T).T @ R_tilde_inv
        I_LC = np.eye(n) - L @ C2
        cross = I_LC @ GMR @ L.T
        P_post = symmetrize(I_LC @ P @ I_LC.T + L @ R2 @ L.T - cross - cross.T)
    else:
        raise ValueError(f"unknown gain variant {variant!r}")
    x = _wrap_components(prior.x + L @ nu, model.x_angles)
    return StateEstimate(x, P_post), L


def update_state(model, prior, z2, M2, lin, variant=GainVariant.MINIMUM_VARIANCE):
    """Correct the predicted state with the reference sensors.

    Returns ``(posterior, L)``. The minimum-variance variant tolerates a
    singular innovation covariance through its pseudoinverse; the verbatim
    variant raises :class:`SingularUpdateError` when its denominator is
    singular.
    """
    nu, _, fac = _innovation(model, prior, z2, M2, lin)
    return _update(model, prior, nu, fac, M2, lin, GainVariant(variant))


def estimate_sensor_anomaly(model, posterior, z1, lin):
    """Testing-sensor anomaly ``z1 - h1(x)`` and its covariance ``C1 P C1^T + R1``."""
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    if model.z1_dim == 0:
        return np.zeros(0), np.zeros((0, 0))
    d_s = _wrap_components(z1 - _finite(model.h1(posterior.x), "h1"), model.z1_angles)
    P_s = symmetrize(lin.C1 @ posterior.P @ lin.C1.T + model.R1)
    return d_s, P_s


def mode_likelihood(model, prior, z2, M2, lin):
    """Innovation, innovation covariance and mode likelihood.

    Returns ``(nu, P_bar, N)`` with ``N`` the Gaussian density of ``nu`` on
    the range of ``P_bar``.
    """
    nu, P_bar, fac = _innovation(model, prior, z2, M2, lin)
    return nu, P_bar, gaussian_likelihood(nu, fac)


def nuise_step(model, prev, u, z1, z2, variant=GainVariant.MINIMUM_VARIANCE, d_a_lin=None):
    """Run one full NUISE iteration for a single mode.

    Parameters
    ----------
    model : ModeModel
    prev : StateEstimate
        Posterior at the previous step.
    u : array_like
        Command applied over the last interval.
    z1, z2 : array_like
        Testing and reference readings at the current step.
    variant : GainVariant or str
    d_a_lin : array_like, optional
        Actuator-anomaly linearization point, typically the previous estimate.

    Raises
    ------
    StepFailure
        Wraps the underlying error; ``.stage`` names the failing stage.
    """
    variant = GainVariant(variant)
    stage = "actuator-anomaly"
    try:
        d_a, P_a, M2, lin = estimate_actuator_anomaly(model, prev, u, z2, d_a_lin)
        stage = "prediction"
        prior = predict_state(model, prev, u, d_a, M2, lin)
        stage = "innovation"
        nu, P_bar, fac = _innovation(model, prior, z2, M2, lin)
        stage = "update"
        post, L = _update(model, prior, nu, fac, M2, lin, variant)
        stage = "sensor-anomaly"
        d_s, P_s = estimate_sensor_anomaly(model, post, z1, lin)
        stage = "likelihood"
        N = gaussian_likelihood(nu, fac)
    except (NuiseError, CovarianceError, np.linalg.LinAlgError, ValueError) as exc:
        if isinstance(exc, StepFailure):
            raise
        raise StepFailure(stage, exc) from exc
    return NuiseStepOutput(
        state=post,
        predicted=prior,
        d_a=d_a,
        P_a=P_a,
        d_s=d_s,
        P_s=P_s,
        innovation=nu,
        innovation_cov=P_bar,
        likelihood=N,
        M2=M2,
        L=L,
        linearization=lin,
    )
