"""Scenario JSON loading, validation, and saving.

A scenario file carries the world (bounds, obstacles, virtual lane
boundaries), the parking task (start and goal poses), the vehicle, and
the planner configuration.  Validation collects every violated invariant
before raising, and each message is prefixed with the file line of the
offending entry so errors in hand-edited files are quick to find.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math

import numpy as np

from .config import (
    ConfigError,
    PlannerWeights,
    SolverConfig,
    solver_from_dict,
    weights_from_dict,
)
from .geometry import ConvexPolytope, Pose, VehicleShape
from .vehicle import VehicleParams

SCHEMA_TAG = "parkopt-scenario-1"

_VEHICLE_FIELDS = (
    "wheelbase",
    "length",
    "width",
    "rear_axle_to_center",
    "steering_limit",
    "accel_limit",
    "steering_rate_limit",
    "accel_rate_limit",
)


class ParseError(ValueError):
    """Unreadable scenario file: bad JSON or wrong top-level shape."""


class ValidationError(ValueError):
    """One or more scenario invariants violated.

    The messages attribute lists every violation; str() joins them.
    """

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


@dataclass
class StartGrid:
    """Benchmark start poses: a regular x-y grid at a fixed heading."""

    x_min: float
    x_max: float
    x_count: int
    y_min: float
    y_max: float
    y_count: int
    heading: float = 0.0

    def poses(self) -> list[Pose]:
        xs = np.linspace(self.x_min, self.x_max, self.x_count)
        ys = np.linspace(self.y_min, self.y_max, self.y_count)
        return [Pose(float(x), float(y), self.heading) for y in ys for x in xs]

    def __len__(self) -> int:
        return self.x_count * self.y_count


@dataclass
class Scenario:
    name: str
    bounds: tuple
    start: Pose
    goal: Pose
    obstacles: list = field(default_factory=list)
    virtual_boundaries: list = field(default_factory=list)
    vehicle: VehicleParams | None = None
    weights: PlannerWeights = field(default_factory=PlannerWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    benchmark: StartGrid | None = None
    vehicle_dims: dict = field(default_factory=dict)

    def all_obstacles(self) -> list:
        """Physical obstacles followed by virtual boundaries."""
        return list(self.obstacles) + list(self.virtual_boundaries)

    @property
    def n_physical(self) -> int:
        return len(self.obstacles)

    @property
    def n_virtual(self) -> int:
        return len(self.virtual_boundaries)


def _element_line(raw: str, key: str, index: int) -> int | None:
    """Line (1-based) where element `index` of the array under `key` starts."""
    pos = raw.find('"%s"' % key)
    if pos < 0:
        return None
    open_pos = raw.find("[", pos)
    if open_pos < 0:
        return None
    depth = 0
    elem = 0
    for i in range(open_pos, len(raw)):
        ch = raw[i]
        if ch == "[":
            depth += 1
            if depth == 2 and elem == index:
                return raw.count("\n", 0, i) + 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return None
        elif ch == "," and depth == 1:
            elem += 1
    return None


def _key_line(raw: str, key: str) -> int | None:
    pos = raw.find('"%s"' % key)
    if pos < 0:
        return None
    return raw.count("\n", 0, pos) + 1


def _pose_from(entry, label, errors, raw):
    line = _key_line(raw, label)
    prefix = "line %s: %s" % (line if line else "?", label)
    if (not isinstance(entry, (list, tuple)) or len(entry) != 3
            or not all(isinstance(v, (int, float)) for v in entry)):
        errors.append("%s must be [x, y, heading]" % prefix)
        return None
    if not all(math.isfinite(v) for v in entry):
        errors.append("%s entries must be finite" % prefix)
        return None
    return Pose(float(entry[0]), float(entry[1]), float(entry[2]))


def _polygons_from(entries, key, errors, raw):
    out = []
    if not isinstance(entries, list):
        errors.append("line %s: %s must be a list of polygons"
                      % (_key_line(raw, key) or "?", key))
        return out
    for i, verts in enumerate(entries):
        line = _element_line(raw, key, i) or "?"
        try:
            arr = np.asarray(verts, dtype=float)
        except (TypeError, ValueError):
            errors.append("line %s: %s[%d] vertices are not numeric" % (line, key, i))
            continue
        try:
            out.append(ConvexPolytope.from_vertices(arr))
        except ValueError as exc:
            errors.append("line %s: %s[%d]: %s" % (line, key, i, exc))
    return out


def _vehicle_from(entry, errors, raw):
    line = _key_line(raw, "vehicle") or "?"
    if not isinstance(entry, dict):
        errors.append("line %s: vehicle must be an object" % line)
        return None, {}
    missing = [k for k in _VEHICLE_FIELDS if k not in entry]
    unknown = sorted(set(entry) - set(_VEHICLE_FIELDS))
    if missing:
        errors.append("line %s: vehicle missing fields %s" % (line, ", ".join(missing)))
    if unknown:
        errors.append("line %s: vehicle unknown fields %s" % (line, ", ".join(unknown)))
    if missing or unknown:
        return None, {}
    bad = [k for k in _VEHICLE_FIELDS
           if not (isinstance(entry[k], (int, float)) and math.isfinite(entry[k]))]
    if bad:
        errors.append("line %s: vehicle fields not finite numbers: %s" % (line, ", ".join(bad)))
        return None, {}
    dims = {k: float(entry[k]) for k in _VEHICLE_FIELDS}
    try:
        shape = VehicleShape.from_dimensions(
            dims["length"], dims["width"], dims["rear_axle_to_center"])
        params = VehicleParams(
            wheelbase=dims["wheelbase"],
            shape=shape,
            u_min=np.array([-dims["steering_limit"], -dims["accel_limit"]]),
            u_max=np.array([dims["steering_limit"], dims["accel_limit"]]),
            rate_min=np.array([-dims["steering_rate_limit"], -dims["accel_rate_limit"]]),
            rate_max=np.array([dims["steering_rate_limit"], dims["accel_rate_limit"]]),
        )
    except ValueError as exc:
        errors.append("line %s: vehicle: %s" % (line, exc))
        return None, dims
    return params, dims


def _benchmark_from(entry, errors, raw):
    line = _key_line(raw, "benchmark") or "?"
    if not isinstance(entry, dict):
        errors.append("line %s: benchmark must be an object" % line)
        return None
    needed = ("x", "y")
    for axis in needed:
        spec = entry.get(axis)
        if (not isinstance(spec, list) or len(spec) != 3
                or not all(isinstance(v, (int, float)) for v in spec)
                or int(spec[2]) != spec[2] or spec[2] < 1):
            errors.append("line %s: benchmark.%s must be [min, max, count]" % (line, axis))
            return None
    heading = entry.get("heading", 0.0)
    if not isinstance(heading, (int, float)):
        errors.append("line %s: benchmark.heading must be a number" % line)
        return None
    unknown = sorted(set(entry) - {"x", "y", "heading"})
    if unknown:
        errors.append("line %s: benchmark unknown fields %s" % (line, ", ".join(unknown)))
        return None
    gx, gy = entry["x"], entry["y"]
    return StartGrid(float(gx[0]), float(gx[1]), int(gx[2]),
                     float(gy[0]), float(gy[1]), int(gy[2]), float(heading))


def scenario_from_dict(data: dict, raw: str = "") -> Scenario:
    """Build and validate a Scenario; raises ValidationError with every
    violation found, each tagged with a source line when raw text is given."""
    errors: list[str] = []
    if data.get("schema") != SCHEMA_TAG:
        errors.append("line %s: schema must be %r, got %r"
                      % (_key_line(raw, "schema") or 1, SCHEMA_TAG, data.get("schema")))
    name = data.get("name")
    if not isinstance(name, str) or not name:
        errors.append("line %s: name must be a nonempty string"
                      % (_key_line(raw, "name") or "?"))
        name = "?"

    bounds = data.get("bounds")
    bl = _key_line(raw, "bounds") or "?"
    if (not isinstance(bounds, list) or len(bounds) != 4
            or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in bounds)):
        errors.append("line %s: bounds must be [xmin, ymin, xmax, ymax]" % bl)
        bounds = (0.0, 0.0, 1.0, 1.0)
    elif bounds[0] >= bounds[2] or bounds[1] >= bounds[3]:
        errors.append("line %s: bounds min must be below max on both axes" % bl)
        bounds = (0.0, 0.0, 1.0, 1.0)
    bounds = tuple(float(v) for v in bounds)

    start = _pose_from(data.get("start"), "start", errors, raw)
    goal = _pose_from(data.get("goal"), "goal", errors, raw)
    for label, pose in (("start", start), ("goal", goal)):
        if pose is not None and not (bounds[0] <= pose.x <= bounds[2]
                                     and bounds[1] <= pose.y <= bounds[3]):
            errors.append("line %s: %s position lies outside bounds"
                          % (_key_line(raw, label) or "?", label))

    obstacles = _polygons_from(data.get("obstacles", []), "obstacles", errors, raw)
    virtual = _polygons_from(data.get("virtual_boundaries", []),
                             "virtual_boundaries", errors, raw)
    vehicle, dims = _vehicle_from(data.get("vehicle"), errors, raw)

    weights = PlannerWeights()
    try:
        weights = weights_from_dict(data.get("weights", {}))
    except (ConfigError, TypeError) as exc:
        errors.append("line %s: weights: %s" % (_key_line(raw, "weights") or "?", exc))
    solver = SolverConfig()
    try:
        solver = solver_from_dict(data.get("solver", {}))
    except (ConfigError, TypeError) as exc:
        errors.append("line %s: solver: %s" % (_key_line(raw, "solver") or "?", exc))

    benchmark = None
    if "benchmark" in data:
        benchmark = _benchmark_from(data["benchmark"], errors, raw)

    known = {"schema", "name", "bounds", "start", "goal", "obstacles",
             "virtual_boundaries", "vehicle", "weights", "solver", "benchmark"}
    unknown = sorted(set(data) - known)
    if unknown:
        errors.append("line ?: unknown top-level fields %s" % ", ".join(unknown))

    if errors:
        raise ValidationError(errors)
    return Scenario(name=name, bounds=bounds, start=start, goal=goal,
                    obstacles=obstacles, virtual_boundaries=virtual,
                    vehicle=vehicle, weights=weights, solver=solver,
                    benchmark=benchmark, vehicle_dims=dims)


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError("cannot read %s: %s" % (path, exc)) from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError("%s:%d:%d: %s" % (path, exc.lineno, exc.colno, exc.msg)) from None
    if not isinstance(data, dict):
        raise ParseError("%s: top level must be a JSON object" % path)
    try:
        return scenario_from_dict(data, raw)
    except ValidationError as exc:
        raise ValidationError(["%s: %s" % (path, m) for m in exc.messages]) from None


def scenario_to_dict(scn: Scenario) -> dict:
    data = {
        "schema": SCHEMA_TAG,
        "name": scn.name,
        "bounds": list(scn.bounds),
        "start": [scn.start.x, scn.start.y, scn.start.heading],
        "goal": [scn.goal.x, scn.goal.y, scn.goal.heading],
        "obstacles": [p.vertices.tolist() for p in scn.obstacles],
        "virtual_boundaries": [p.vertices.tolist() for p in scn.virtual_boundaries],
        "vehicle": dict(scn.vehicle_dims),
        "weights": {k: getattr(scn.weights, k)
                    for k in ("w_x", "w_u", "w_x_rate", "w_u_rate", "w_d", "beta")},
        "solver": {k: getattr(scn.solver, k) for k in (
            "rho", "eps_pri", "eps_dual", "max_outer_iterations",
            "sqp_inner_iterations", "t_min", "t_max", "horizon", "parallelism",
            "eps_clear", "safety_margin", "v_cruise", "pin_goal",
            "warmstart_duals", "adapt_rho", "trust_heading", "trust_steering",
            "trust_clearance")},
    }
    if scn.benchmark is not None:
        b = scn.benchmark
        data["benchmark"] = {"x": [b.x_min, b.x_max, b.x_count],
                             "y": [b.y_min, b.y_max, b.y_count],
                             "heading": b.heading}
    return data


def save_scenario(path, scn: Scenario) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2)
        fh.write("\n")
