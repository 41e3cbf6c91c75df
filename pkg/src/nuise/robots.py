"""Kinematic and sensor models for a differential-drive Khepera robot and a
rear-wheel-drive Tamiya RC car, plus factories assembling them into mode banks.

States are planar poses ``(x, y, theta)`` in metres and radians. Khepera
commands are wheel speeds ``(v_L, v_R)``; Tamiya commands are speed and
steering angle ``(v, phi)``. Actuator anomalies are additive on the same
channels.
"""
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import numpy as np

from .estimator import ModeModel
from .numerics import wrap_angle

__all__ = [
    "DomainError",
    "ConfigurationError",
    "KheperaParams",
    "TamiyaParams",
    "Pose2D",
    "ImuSample",
    "NoiseConfig",
    "DEFAULT_WALLS",
    "khepera_f",
    "khepera_jacobians",
    "khepera_h_ips",
    "khepera_encoder_to_pose",
    "khepera_h_lidar",
    "lidar_jacobian",
    "tamiya_f",
    "tamiya_jacobians",
    "quaternion_to_matrix",
    "imu_dead_reckon",
    "sensor_names",
    "sensor_dim",
    "make_mode_set",
]


class DomainError(ValueError):
    """Input outside the region where a model is defined."""


class ConfigurationError(ValueError):
    """Invalid robot or bank configuration."""


DEFAULT_WALLS = (
    (0.5, 0.0),
    (0.5, np.pi / 2),
    (0.5, np.pi),
    (0.5, -np.pi / 2),
)


@dataclass(frozen=True)
class KheperaParams:
    """Khepera geometry.

    ``walls`` holds ``(r, phi)`` pairs: each wall is the line at distance
    ``r`` from the origin along the unit normal at angle ``phi``. The default
    arena is a 1 m square centred on the origin. ``encoder_r`` defaults to
    the wheel separation. With ``standard_heading_denominator`` the heading
    rate divides by ``D`` instead of ``D / 2``.
    """

    T: float = 0.1
    D: float = 0.1
    lidar_offset: Tuple[float, float] = (0.02, 0.0)
    walls: Tuple[Tuple[float, float], ...] = DEFAULT_WALLS
    encoder_r: Optional[float] = None
    standard_heading_denominator: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        if not self.D > 0:
            raise ConfigurationError("D must be positive")
        walls = tuple((float(r), float(phi)) for r, phi in self.walls)
        if len(walls) != 4:
            raise ConfigurationError(f"the arena model needs exactly 4 walls, got {len(walls)}")
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "lidar_offset", tuple(float(v) for v in self.lidar_offset))
        if self.encoder_r is None:
            object.__setattr__(self, "encoder_r", float(self.D))
        elif not self.encoder_r > 0:
            raise ConfigurationError("encoder_r must be positive")

    @property
    def heading_denominator(self):
        return self.D if self.standard_heading_denominator else self.D / 2.0


@dataclass(frozen=True)
class TamiyaParams:
    """Tamiya geometry. The LiDAR arena defaults to a 6 m square."""

    T: float = 0.1
    L: float = 0.25
    imu_gravity_compensated: bool = True
    lidar_offset: Tuple[float, float] = (0.0, 0.0)
    walls: Tuple[Tuple[float, float], ...] = tuple((3.0, phi) for _, phi in DEFAULT_WALLS)

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        if not self.L > 0:
            raise ConfigurationError("L must be positive")
        walls = tuple((float(r), float(phi)) for r, phi in self.walls)
        if len(walls) != 4:
            raise ConfigurationError(f"the arena model needs exactly 4 walls, got {len(walls)}")
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "lidar_offset", tuple(float(v) for v in self.lidar_offset))


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @classmethod
    def from_array(cls, a):
        x, y, theta = np.asarray(a, dtype=float).reshape(3)
        return cls(x, y, theta)

    def as_array(self):
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class ImuSample:
    """Orientation quaternion ``(q0, q1, q2, q3)`` (scalar first), body-frame
    acceleration and angular rate. The quaternion is normalized on creation."""

    q: np.ndarray
    a_local: np.ndarray
    w_local: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _normalize_quaternion(self.q))
        object.__setattr__(self, "a_local", np.asarray(self.a_local, dtype=float).reshape(3))
        object.__setattr__(self, "w_local", np.asarray(self.w_local, dtype=float).reshape(3))


# -- Khepera ------------------------------------------------------------------


def _pose_array(pose):
    if isinstance(pose, Pose2D):
        return pose.as_array()
    return np.asarray(pose, dtype=float).reshape(3)


def khepera_f(pose, controls, anomaly=(0.0, 0.0), params=KheperaParams()):
    """Advance a Khepera pose by one control interval.

    Accepts a :class:`Pose2D` or a length-3 array and returns the same kind.

    >>> khepera_f(Pose2D(0, 0, 0), (0.2, 0.2), params=KheperaParams(T=0.1))
    Pose2D(x=0.020000000000000004, y=0.0, theta=0.0)
    """
    x, y, th = _pose_array(pose)
    vL, vR = np.asarray(controls, dtype=float).reshape(2)
    dL, dR = np.asarray(anomaly, dtype=float).reshape(2)
    sL, sR = vL + dL, vR + dR
    T = params.T
    v_mean = 0.5 * (sL + sR)
    out = np.array([
        x + T * np.cos(th) * v_mean,
        y + T * np.sin(th) * v_mean,
        wrap_angle(th + T * (sR - sL) / params.heading_denominator),
    ])
    return Pose2D.from_array(out) if isinstance(pose, Pose2D) else out


def khepera_jacobians(pose, controls, anomaly=(0.0, 0.0), params=KheperaParams()):
    """``(A, B, G)`` of :func:`khepera_f`; ``B == G`` since anomalies add to the wheel speeds."""
    _, _, th = _pose_array(pose)
    vL, vR = np.asarray(controls, dtype=float).reshape(2)
    dL, dR = np.asarray(anomaly, dtype=float).reshape(2)
    T = params.T
    v_mean = 0.5 * (vL + dL + vR + dR)
    c, s = np.cos(th), np.sin(th)
    A = np.array([
        [1.0, 0.0, -T * s * v_mean],
        [0.0, 1.0, T * c * v_mean],
        [0.0, 0.0, 1.0],
    ])
    k = T / params.heading_denominator
    B = np.array([
        [0.5 * T * c, 0.5 * T * c],
        [0.5 * T * s, 0.5 * T * s],
        [-k, k],
    ])
    return A, B, B.copy()


def khepera_h_ips(pose):
    """The indoor positioning system observes the pose directly."""
    return _pose_array(pose).copy()


def khepera_encoder_to_pose(prev, raw, params=KheperaParams()):
    """Convert wheel travel ``(l_L, l_R)`` over one interval into a pose.

    The heading is updated first and the translation uses the new heading.
    """
    x, y, th = _pose_array(prev)
    lL, lR = np.asarray(raw, dtype=float).reshape(2)
    th_new = th + (lR - lL) / params.encoder_r
    half = 0.5 * (lL + lR)
    return Pose2D(x + half * np.cos(th_new), y + half * np.sin(th_new), th_new)


def khepera_h_lidar(pose, params=KheperaParams()):
    """Perpendicular LiDAR distance to each wall, followed by the heading.

    For wall ``(r, phi)`` and LiDAR offset ``(x', y')``::

        l = r - (x + x' sin(theta) + y' cos(theta)) cos(phi)
              - (y - x' cos(theta) + y' sin(theta)) sin(phi)
    """
    x, y, th = _pose_array(pose)
    xo, yo = params.lidar_offset
    s, c = np.sin(th), np.cos(th)
    px = x + xo * s + yo * c
    py = y - xo * c + yo * s
    walls = np.asarray(params.walls)
    r, phi = walls[:, 0], walls[:, 1]
    dist = r - px * np.cos(phi) - py * np.sin(phi)
    return np.append(dist, th)


def lidar_jacobian(pose, params=KheperaParams()):
    _, _, th = _pose_array(pose)
    xo, yo = params.lidar_offset
    s, c = np.sin(th), np.cos(th)
    walls = np.asarray(params.walls)
    cphi, sphi = np.cos(walls[:, 1]), np.sin(walls[:, 1])
    dpx = xo * c - yo * s
    dpy = xo * s + yo * c
    C = np.zeros((walls.shape[0] + 1, 3))
    C[:-1, 0] = -cphi
    C[:-1, 1] = -sphi
    C[:-1, 2] = -dpx * cphi - dpy * sphi
    C[-1, 2] = 1.0
    return C


# -- Tamiya -------------------------------------------------------------------


def _steer(phi, d_phi):
    steer = phi + d_phi
    if not abs(steer) < np.pi / 2:
        raise DomainError(f"effective steering angle {steer:.4f} rad reaches the tan singularity")
    return steer


def tamiya_f(pose, controls, anomaly=(0.0, 0.0), params=TamiyaParams()):
    """Advance a Tamiya pose by one interval.

    The speed anomaly moves the position but, as in the model this follows,
    not the heading: the heading rate uses the commanded speed.
    """
    x, y, th = _pose_array(pose)
    v, phi = np.asarray(controls, dtype=float).reshape(2)
    dv, dphi = np.asarray(anomaly, dtype=float).reshape(2)
    steer = _steer(phi, dphi)
    T = params.T
    out = np.array([
        x + T * (v + dv) * np.cos(th),
        y + T * (v + dv) * np.sin(th),
        wrap_angle(th + T * v / params.L * np.tan(steer)),
    ])
    return Pose2D.from_array(out) if isinstance(pose, Pose2D) else out


def tamiya_jacobians(pose, controls, anomaly=(0.0, 0.0), params=TamiyaParams()):
    _, _, th = _pose_array(pose)
    v, phi = np.asarray(controls, dtype=float).reshape(2)
    dv, dphi = np.asarray(anomaly, dtype=float).reshape(2)
    steer = _steer(phi, dphi)
    T, L = params.T, params.L
    c, s = np.cos(th), np.sin(th)
    sec2 = 1.0 / np.cos(steer) ** 2
    A = np.array([
        [1.0, 0.0, -T * (v + dv) * s],
        [0.0, 1.0, T * (v + dv) * c],
        [0.0, 0.0, 1.0],
    ])
    B = np.array([
        [T * c, 0.0],
        [T * s, 0.0],
        [T / L * np.tan(steer), T * v / L * sec2],
    ])
    G = np.array([
        [T * c, 0.0],
        [T * s, 0.0],
        [0.0, T * v / L * sec2],
    ])
    return A, B, G


# -- IMU ----------------------------------------------------------------------


def _normalize_quaternion(q):
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not n > 0 or not np.isfinite(n):
        raise DomainError("quaternion must be nonzero and finite")
    return q / n


def quaternion_to_matrix(q):
    """Body-to-global rotation matrix of a scalar-first quaternion."""
    q0, q1, q2, q3 = _normalize_quaternion(q)
    return np.array([
        [q0**2 + q1**2 - q2**2 - q3**2, 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), q0**2 - q1**2 + q2**2 - q3**2, 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), q0**2 - q1**2 - q2**2 + q3**2],
    ])


def imu_dead_reckon(prev_pose, prev_vel, sample, T, gravity=None):
    """Integrate one IMU sample into a planar pose and a 3-D velocity.

    The velocity is updated first and the position step then adds both the
    new velocity times ``T`` and half the acceleration times ``T**2``.
    ``gravity``, when given, is subtracted from the global-frame
    acceleration (for samples that are not gravity compensated).

    Returns
    -------
    pose : Pose2D
    vel : ndarray, shape (3,)
    """
    if not isinstance(sample, ImuSample):
        sample = ImuSample(*sample)
    C = quaternion_to_matrix(sample.q)
    a = C @ sample.a_local
    if gravity is not None:
        a = a - np.asarray(gravity, dtype=float).reshape(3)
    w = C @ sample.w_local
    vel = np.asarray(prev_vel, dtype=float).reshape(3) + a * T
    x, y, th = _pose_array(prev_pose)
    pose = Pose2D(
        x + vel[0] * T + 0.5 * a[0] * T**2,
        y + vel[1] * T + 0.5 * a[1] * T**2,
        th + w[2] * T,
    )
    return pose, vel


# -- mode sets ----------------------------------------------------------------

_SENSORS = {
    "khepera": ("ips", "encoder", "lidar"),
    "tamiya": ("ips", "lidar", "imu"),
}
_SENSOR_DIMS = {"ips": 3, "encoder": 3, "imu": 3, "lidar": 5}
_SENSOR_ANGLE = {"ips": 2, "encoder": 2, "imu": 2, "lidar": 4}


def sensor_names(robot):
    try:
        return _SENSORS[robot]
    except KeyError:
        raise ConfigurationError(f"unknown robot {robot!r}") from None


def sensor_dim(name):
    return _SENSOR_DIMS[name]


@dataclass(frozen=True)
class NoiseConfig:
    """Process and per-sensor measurement noise covariances.

    Missing sensor entries fall back to ``1e-4 * I``.
    """

    Q: np.ndarray = field(default_factory=lambda: np.diag([1e-6, 1e-6, 1e-6]))
    R: Mapping[str, np.ndarray] = field(default_factory=dict)

    def sensor_cov(self, name):
        if name in self.R:
            return np.atleast_2d(np.asarray(self.R[name], dtype=float))
        return 1e-4 * np.eye(_SENSOR_DIMS[name])


def _sensor_functions(robot, params, name):
    if name in ("ips", "encoder", "imu"):
        return khepera_h_ips, lambda x: np.eye(3)
    if name == "lidar":
        return (lambda x: khepera_h_lidar(x, params)), (lambda x: lidar_jacobian(x, params))
    raise ConfigurationError(f"sensor {name!r} is not available on {robot}")


def _stack(robot, params, names):
    fns = [_sensor_functions(robot, params, n) for n in names]
    if not fns:
        return (lambda x: np.zeros(0)), (lambda x: np.zeros((0, 3))), ()
    angles, start = [], 0
    for n in names:
        angles.append(start + _SENSOR_ANGLE[n])
        start += _SENSOR_DIMS[n]

    def h(x):
        return np.concatenate([fn(x) for fn, _ in fns])

    def jac(x):
        return np.vstack([jf(x) for _, jf in fns])

    return h, jac, tuple(angles)


def _block_diag(mats):
    mats = [np.atleast_2d(m) for m in mats]
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    return out


def _make_mode(mode_id, robot, params, noise, testing, reference, d_a_dim):
    if robot == "khepera":
        fk, jk = khepera_f, khepera_jacobians
    else:
        fk, jk = tamiya_f, tamiya_jacobians
    zero = np.zeros(2)

    if d_a_dim:
        def f(x, u, d):
            return fk(x, u, d, params)

        def jac_f(x, u, d):
            return jk(x, u, d, params)
    else:
        def f(x, u, d):
            return fk(x, u, zero, params)

        def jac_f(x, u, d):
            A, B, _ = jk(x, u, zero, params)
            return A, B, np.zeros((3, 0))

    h1, j1, a1 = _stack(robot, params, testing)
    h2, j2, a2 = _stack(robot, params, reference)
    return ModeModel(
        mode_id=mode_id,
        f=f,
        h1=h1,
        h2=h2,
        Q=np.asarray(noise.Q, dtype=float),
        R1=_block_diag([noise.sensor_cov(n) for n in testing]) if testing else np.zeros((0, 0)),
        R2=_block_diag([noise.sensor_cov(n) for n in reference]),
        d_a_dim=d_a_dim,
        jac_f=jac_f,
        jac_h1=j1,
        jac_h2=j2,
        x_angles=(2,),
        z1_angles=a1,
        z2_angles=a2,
        testing=tuple(testing),
        reference=tuple(reference),
        sensor_dims={n: _SENSOR_DIMS[n] for n in (*testing, *reference)},
    )


def make_mode_set(robot, params=None, noise=None, sensors=None):
    """Default mode bank for a robot.

    Mode 0 is nominal (no anomalies, every sensor a reference), mode 1
    estimates the full actuator anomaly with every sensor as reference, and
    one further mode per sensor treats that sensor as the testing sensor
    with the others as references.

    Mode ids are ``"nominal"``, ``"actuator"`` and ``"sensor:<name>"``.
    """
    if robot not in _SENSORS:
        raise ConfigurationError(f"unknown robot {robot!r}")
    if params is None:
        params = KheperaParams() if robot == "khepera" else TamiyaParams()
    noise = NoiseConfig() if noise is None else noise
    sensors = tuple(_SENSORS[robot] if sensors is None else sensors)
    if not sensors:
        raise ConfigurationError("at least one sensor is required")
    for s in sensors:
        if s not in _SENSORS[robot]:
            raise ConfigurationError(f"sensor {s!r} is not available on {robot}")

    modes = [
        _make_mode("nominal", robot, params, noise, (), sensors, 0),
        _make_mode("actuator", robot, params, noise, (), sensors, 2),
    ]
    if len(sensors) > 1:
        for s in sensors:
            rest = tuple(n for n in sensors if n != s)
            modes.append(_make_mode(f"sensor:{s}", robot, params, noise, (s,), rest, 0))
    return modes
