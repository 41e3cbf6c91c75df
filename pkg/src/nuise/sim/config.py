"""Scenario configuration: a YAML document validated into :class:`ScenarioConfig`.

Every validation error carries the line of the offending key so that a
hand-edited scenario can be fixed quickly. The schema is described in
``docs/scenario_format.md``.
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import yaml

from ..estimator import GainVariant
from ..robots import KheperaParams, NoiseConfig, TamiyaParams, sensor_dim, sensor_names

__all__ = [
    "FORMAT_VERSION",
    "ConfigError",
    "Injection",
    "ControllerConfig",
    "ScenarioConfig",
    "load_config",
    "parse_config",
]

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid scenario configuration, optionally anchored to a source line."""

    def __init__(self, message, line=None, source=None):
        self.message = message
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class Injection:
    """An additive anomaly active on steps ``start_step <= k < end_step``.

    For ``kind == "actuator"`` the target is ``"all"`` (magnitude covers
    every actuator channel) or a channel index. For ``kind == "sensor"`` the
    target is a sensor name and the magnitude covers that sensor's reading.
    """

    kind: str
    target: object
    magnitude: np.ndarray
    start_step: int
    end_step: int

    def active(self, k):
        return self.start_step <= k < self.end_step

    @property
    def label(self):
        return "actuator" if self.kind == "actuator" else f"sensor:{self.target}"


@dataclass(frozen=True)
class ControllerConfig:
    """Open-loop schedule ``[(n_steps, u), ...]`` or waypoint following."""

    type: str = "open-loop"
    schedule: Tuple[Tuple[int, Tuple[float, ...]], ...] = ()
    waypoints: Tuple[Tuple[float, float], ...] = ()
    speed: float = 0.05
    gain: float = 2.0
    tolerance: float = 0.03
    max_steer: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    robot: str
    params: object
    noise: NoiseConfig
    P0: np.ndarray
    initial_pose: np.ndarray
    controller: ControllerConfig
    injections: List[Injection] = field(default_factory=list)
    sensors: Tuple[str, ...] = ()
    steps: int = 100
    trials: int = 1
    seed: int = 0
    alpha: float = 0.01
    epsilon: float = 1e-6
    variant: GainVariant = GainVariant.MINIMUM_VARIANCE
    sample_noise: bool = True
    burn_in: int = 10
    format_version: int = FORMAT_VERSION

    def with_(self, **changes):
        return replace(self, **changes)


# -- YAML with line numbers -----------------------------------------------------


class _Doc:
    """Plain Python values plus the source line of every key path."""

    def __init__(self, text, source):
        self.source = source
        self.lines = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            raise ConfigError(f"malformed YAML: {exc.problem or exc}",
                              mark.line + 1 if mark else None, source) from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML: {exc}", None, source) from None
        if node is None:
            raise ConfigError("empty configuration", 1, source)
        self._loader = yaml.SafeLoader("")
        self.value = self._build(node, ())

    def _build(self, node, path):
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = self._loader.construct_object(k, deep=True)
                if key in out:
                    raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1, self.source)
                self.lines[path + (key,)] = k.start_mark.line + 1
                out[key] = self._build(v, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(v, path + (i,)) for i, v in enumerate(node.value)]
        return self._loader.construct_object(node, deep=True)

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def error(self, path, message):
        dotted = ".".join(str(p) for p in path)
        return ConfigError(f"{dotted}: {message}" if dotted else message, self.line(path), self.source)


class _Reader:
    def __init__(self, doc):
        self.doc = doc

    def get(self, path, default=...):
        cur = self.doc.value
        for p in path:
            if isinstance(cur, dict) and p in cur:
                cur = cur[p]
            elif isinstance(cur, list) and isinstance(p, int) and p < len(cur):
                cur = cur[p]
            else:
                if default is ...:
                    raise self.doc.error(path, "required key is missing")
                return default
        return cur

    def number(self, path, default=..., positive=False, nonneg=False):
        v = self.get(path, default)
        if v is None and default is None:
            return None
        try:
            if isinstance(v, bool):
                raise TypeError
            x = float(v)
        except (TypeError, ValueError):
            raise self.doc.error(path, f"expected a number, got {v!r}") from None
        if not np.isfinite(x):
            raise self.doc.error(path, "must be finite")
        if positive and not x > 0:
            raise self.doc.error(path, "must be positive")
        if nonneg and x < 0:
            raise self.doc.error(path, "must be nonnegative")
        return x

    def integer(self, path, default=..., minimum=None):
        v = self.get(path, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
            raise self.doc.error(path, f"expected an integer, got {v!r}")
        v = int(v)
        if minimum is not None and v < minimum:
            raise self.doc.error(path, f"must be at least {minimum}")
        return v

    def boolean(self, path, default=...):
        v = self.get(path, default)
        if not isinstance(v, bool):
            raise self.doc.error(path, f"expected true or false, got {v!r}")
        return v

    def vector(self, path, length=None, default=...):
        v = self.get(path, default)
        if default is not ... and v is default:
            return np.asarray(default, dtype=float)
        if not isinstance(v, list):
            raise self.doc.error(path, f"expected a list of numbers, got {v!r}")
        out = np.array([self.number(path + (i,)) for i in range(len(v))])
        if length is not None and out.size != length:
            raise self.doc.error(path, f"expected {length} entries, got {out.size}")
        return out

    def covariance(self, path, dim, default=...):
        """Diagonal given as a list, or a full matrix as a list of rows."""
        v = self.get(path, default)
        if isinstance(v, np.ndarray):
            return v
        if isinstance(v, list) and v and all(isinstance(r, list) for r in v):
            M = np.array([self.vector(path + (i,), dim) for i in range(len(v))])
            if M.shape != (dim, dim):
                raise self.doc.error(path, f"expected a {dim}x{dim} matrix")
            if not np.allclose(M, M.T):
                raise self.doc.error(path, "matrix must be symmetric")
        else:
            M = np.diag(self.vector(path, dim))
        if np.linalg.eigvalsh(M)[0] < 0:
            raise self.doc.error(path, "covariance must be positive semi-definite")
        return M


def _parse_params(rd, robot):
    raw = rd.get(("params",), {})
    if not isinstance(raw, dict):
        raise rd.doc.error(("params",), "expected a mapping")
    kw = {}
    cls = KheperaParams if robot == "khepera" else TamiyaParams
    allowed = set(cls.__dataclass_fields__)
    for key in raw:
        if key not in allowed:
            raise rd.doc.error(("params", key), f"unknown {robot} parameter")
    for key in raw:
        path = ("params", key)
        if key in ("lidar_offset",):
            kw[key] = tuple(rd.vector(path, 2))
        elif key == "walls":
            walls = rd.get(path)
            if not isinstance(walls, list):
                raise rd.doc.error(path, "expected a list of [r, phi] pairs")
            kw[key] = tuple(tuple(rd.vector(path + (i,), 2)) for i in range(len(walls)))
        elif key in ("standard_heading_denominator", "imu_gravity_compensated"):
            kw[key] = rd.boolean(path)
        elif key == "encoder_r":
            kw[key] = rd.number(path, None, positive=True)
        else:
            kw[key] = rd.number(path, positive=True)
    try:
        return cls(**kw)
    except ValueError as exc:
        raise rd.doc.error(("params",), str(exc)) from None


def _parse_controller(rd, robot):
    raw = rd.get(("controller",))
    if not isinstance(raw, dict):
        raise rd.doc.error(("controller",), "expected a mapping")
    kind = rd.get(("controller", "type"), "open-loop")
    if kind == "open-loop":
        sched = rd.get(("controller", "schedule"))
        if not isinstance(sched, list) or not sched:
            raise rd.doc.error(("controller", "schedule"), "expected a non-empty list of segments")
        segs = []
        for i in range(len(sched)):
            p = ("controller", "schedule", i)
            segs.append((rd.integer(p + ("steps",), minimum=1), tuple(rd.vector(p + ("u",), 2))))
        return ControllerConfig(type="open-loop", schedule=tuple(segs))
    if kind == "waypoint":
        wps = rd.get(("controller", "waypoints"))
        if not isinstance(wps, list) or not wps:
            raise rd.doc.error(("controller", "waypoints"), "expected a non-empty list of [x, y]")
        return ControllerConfig(
            type="waypoint",
            waypoints=tuple(tuple(rd.vector(("controller", "waypoints", i), 2)) for i in range(len(wps))),
            speed=rd.number(("controller", "speed"), 0.05, positive=True),
            gain=rd.number(("controller", "gain"), 2.0, positive=True),
            tolerance=rd.number(("controller", "tolerance"), 0.03, positive=True),
            max_steer=rd.number(("controller", "max_steer"), 0.5, positive=True),
        )
    raise rd.doc.error(("controller", "type"), f"unknown controller type {kind!r}")


def _parse_injections(rd, robot, sensors, steps):
    raw = rd.get(("injections",), [])
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise rd.doc.error(("injections",), "expected a list")
    out = []
    for i in range(len(raw)):
        p = ("injections", i)
        kind = rd.get(p + ("kind",))
        target = rd.get(p + ("target",), "all")
        if kind == "actuator":
            if target == "all":
                mag = rd.vector(p + ("magnitude",), 2)
            elif isinstance(target, int) and not isinstance(target, bool) and 0 <= target < 2:
                mag = rd.vector(p + ("magnitude",), 1)
            else:
                raise rd.doc.error(p + ("target",), "actuator target must be 'all', 0 or 1")
        elif kind == "sensor":
            if target not in sensors:
                raise rd.doc.error(p + ("target",), f"unknown sensor {target!r}; expected one of {list(sensors)}")
            mag = rd.vector(p + ("magnitude",), sensor_dim(target))
        else:
            raise rd.doc.error(p + ("kind",), f"kind must be 'actuator' or 'sensor', got {kind!r}")
        start = rd.integer(p + ("start_step",), minimum=0)
        end = rd.integer(p + ("end_step",), minimum=0)
        if not start <= end <= steps + 1:
            raise rd.doc.error(p, f"need start_step <= end_step <= steps + 1 ({start}, {end}, {steps})")
        out.append(Injection(kind, target, mag, start, end))
    return out


def parse_config(text, source=None):
    """Parse and validate scenario YAML text."""
    doc = _Doc(text, source)
    if not isinstance(doc.value, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    rd = _Reader(doc)
    version = rd.integer(("format_version",), FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise doc.error(("format_version",), f"unsupported format_version {version}")
    robot = rd.get(("robot",))
    if robot not in ("khepera", "tamiya"):
        raise doc.error(("robot",), f"robot must be 'khepera' or 'tamiya', got {robot!r}")
    available = sensor_names(robot)
    sensors = rd.get(("sensors",), list(available))
    if not isinstance(sensors, list) or not sensors:
        raise doc.error(("sensors",), "expected a non-empty list of sensor names")
    for i, s in enumerate(sensors):
        if s not in available:
            raise doc.error(("sensors", i), f"sensor {s!r} is not available on {robot}")
    sensors = tuple(sensors)
    params = _parse_params(rd, robot)
    R = {s: rd.covariance(("noise", "R", s), sensor_dim(s), 1e-4 * np.eye(sensor_dim(s))) for s in sensors}
    noise = NoiseConfig(Q=rd.covariance(("noise", "Q"), 3, np.diag([1e-6] * 3)), R=R)
    P0 = rd.covariance(("noise", "P0"), 3, np.diag([1e-6] * 3))
    steps = rd.integer(("steps",), 100, minimum=1)
    cfg = ScenarioConfig(
        robot=robot,
        params=params,
        noise=noise,
        P0=P0,
        initial_pose=rd.vector(("initial_pose",), 3, [0.0, 0.0, 0.0]),
        controller=_parse_controller(rd, robot),
        injections=_parse_injections(rd, robot, sensors, steps),
        sensors=sensors,
        steps=steps,
        trials=rd.integer(("trials",), 1, minimum=1),
        seed=rd.integer(("seed",), 0, minimum=0),
        alpha=rd.number(("alpha",), 0.01),
        epsilon=rd.number(("epsilon",), 1e-6, positive=True),
        sample_noise=rd.boolean(("noise", "sample"), True),
        burn_in=rd.integer(("burn_in",), 10, minimum=0),
    )
    if not 0.0 < cfg.alpha < 1.0:
        raise doc.error(("alpha",), "alpha must lie in (0, 1)")
    try:
        variant = GainVariant(rd.get(("variant",), GainVariant.MINIMUM_VARIANCE.value))
    except ValueError:
        raise doc.error(("variant",), f"variant must be one of {[v.value for v in GainVariant]}") from None
    return cfg.with_(variant=variant)


def load_config(path):
    """Read and validate a scenario file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", None, str(path)) from None
    return parse_config(text, source=str(path))
