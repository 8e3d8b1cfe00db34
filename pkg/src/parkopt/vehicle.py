"""Kinematic bicycle model: discrete step, rollout, analytic linearization.

State is (x, y, heading, v) at the rear axle; controls are (steering, accel).
The discrete update is forward Euler with a per-step duration:

    x'       = x + v dt cos(heading)
    y'       = y + v dt sin(heading)
    heading' = heading + v dt tan(steering) / wheelbase
    v'       = v + accel dt

Heading is intentionally not wrapped by step/rollout so that multi-turn
maneuvers stay continuous; I/O layers normalize at their boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import VehicleShape

_STEER_LIMIT = math.pi / 2.0 - 1e-6


class LengthMismatch(ValueError):
    """Rollout inputs whose control/time-step counts disagree."""


class SteeringSingularity(ValueError):
    """Steering magnitude at or beyond pi/2, where tan() blows up."""


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.v])

    @classmethod
    def from_array(cls, arr) -> "EgoState":
        x, y, heading, v = (float(a) for a in arr)
        return cls(x, y, heading, v)


@dataclass(frozen=True)
class Control:
    steering: float
    accel: float

    def as_array(self) -> np.ndarray:
        return np.array([self.steering, self.accel])


@dataclass
class VehicleParams:
    """Geometry and actuation limits.

    u_min/u_max bound (steering, accel); rate_min/rate_max bound the
    per-second change of (steering, accel) between consecutive controls.
    """

    wheelbase: float
    shape: VehicleShape
    u_min: np.ndarray = field(default_factory=lambda: np.array([-0.51, -1.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([0.51, 1.0]))
    rate_min: np.ndarray = field(default_factory=lambda: np.array([-1.0, -2.0]))
    rate_max: np.ndarray = field(default_factory=lambda: np.array([1.0, 2.0]))

    def __post_init__(self) -> None:
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        self.rate_min = np.asarray(self.rate_min, dtype=float)
        self.rate_max = np.asarray(self.rate_max, dtype=float)
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if np.any(self.u_min >= self.u_max) or np.any(self.rate_min >= self.rate_max):
            raise ValueError("control bounds must satisfy min < max")


@dataclass
class LinearizedDynamics:
    """First-order model x_next ~ A x + B u + c about a reference point."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray


def _check_steering(steering: float) -> None:
    if abs(steering) >= _STEER_LIMIT:
        raise SteeringSingularity("steering %.6f rad too close to pi/2" % steering)


def step(state: EgoState, control: Control, dt: float, wheelbase: float) -> EgoState:
    """One forward-Euler update."""
    _check_steering(control.steering)
    c = math.cos(state.heading)
    s = math.sin(state.heading)
    return EgoState(
        state.x + state.v * dt * c,
        state.y + state.v * dt * s,
        state.heading + state.v * dt * math.tan(control.steering) / wheelbase,
        state.v + control.accel * dt,
    )


def rollout(
    state: EgoState,
    controls,
    dts,
    wheelbase: float,
) -> list[EgoState]:
    """Iterated step(); returns len(controls)+1 states starting at `state`."""
    controls = list(controls)
    dts = list(dts)
    if len(controls) != len(dts):
        raise LengthMismatch(
            "got %d controls but %d time steps" % (len(controls), len(dts))
        )
    out = [state]
    for u, dt in zip(controls, dts):
        out.append(step(out[-1], u, dt, wheelbase))
    return out


def rollout_array(x0: np.ndarray, u: np.ndarray, dts: np.ndarray, wheelbase: float) -> np.ndarray:
    """Array form of rollout: x0 (4,), u (N,2), dts (N,) -> states (N+1,4)."""
    u = np.asarray(u, dtype=float)
    dts = np.asarray(dts, dtype=float)
    if u.shape[0] != dts.shape[0]:
        raise LengthMismatch("got %d controls but %d time steps" % (u.shape[0], dts.shape[0]))
    n = u.shape[0]
    out = np.empty((n + 1, 4))
    out[0] = x0
    for k in range(n):
        xk = out[k]
        dt = dts[k]
        out[k + 1, 0] = xk[0] + xk[3] * dt * math.cos(xk[2])
        out[k + 1, 1] = xk[1] + xk[3] * dt * math.sin(xk[2])
        out[k + 1, 2] = xk[2] + xk[3] * dt * math.tan(u[k, 0]) / wheelbase
        out[k + 1, 3] = xk[3] + u[k, 1] * dt
    return out


def linearize(
    state: EgoState, control: Control, dt: float, wheelbase: float
) -> LinearizedDynamics:
    """Analytic Jacobians of step() with respect to state and control."""
    _check_steering(control.steering)
    c = math.cos(state.heading)
    s = math.sin(state.heading)
    tan_d = math.tan(control.steering)
    sec2 = 1.0 + tan_d * tan_d
    v = state.v
    A = np.array(
        [
            [1.0, 0.0, -v * dt * s, dt * c],
            [0.0, 1.0, v * dt * c, dt * s],
            [0.0, 0.0, 1.0, dt * tan_d / wheelbase],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array(
        [
            [0.0, 0.0],
            [0.0, 0.0],
            [v * dt * sec2 / wheelbase, 0.0],
            [0.0, dt],
        ]
    )
    x0 = state.as_array()
    u0 = control.as_array()
    c_vec = step(state, control, dt, wheelbase).as_array() - A @ x0 - B @ u0
    return LinearizedDynamics(A, B, c_vec)


def dynamics_defect(states: np.ndarray, u: np.ndarray, dts: np.ndarray, wheelbase: float) -> np.ndarray:
    """Per-step residual f(x_k, u_k, dt_k) - x_{k+1}, shape (N, 4)."""
    x = np.asarray(states, dtype=float)
    u = np.asarray(u, dtype=float)
    dts = np.asarray(dts, dtype=float)
    c = np.cos(x[:-1, 2])
    s = np.sin(x[:-1, 2])
    tan_d = np.tan(u[:, 0])
    res = np.empty((u.shape[0], 4))
    res[:, 0] = x[:-1, 0] + x[:-1, 3] * dts * c - x[1:, 0]
    res[:, 1] = x[:-1, 1] + x[:-1, 3] * dts * s - x[1:, 1]
    res[:, 2] = x[:-1, 2] + x[:-1, 3] * dts * tan_d / wheelbase - x[1:, 2]
    res[:, 3] = x[:-1, 3] + u[:, 1] * dts - x[1:, 3]
    return res


@dataclass
class ControlCheck:
    ok: bool
    box_violation: float
    rate_violation: float


def check_control_limits(
    control: Control,
    previous: Control | None,
    dt: float,
    params: VehicleParams,
    tol: float = 1e-6,
) -> ControlCheck:
    """Box and (if previous given) rate limit check with violation magnitudes."""
    u = control.as_array()
    box = float(np.maximum(u - params.u_max, params.u_min - u).max())
    rate = 0.0
    if previous is not None:
        if dt <= 0:
            raise ValueError("dt must be positive for rate checks")
        r = (u - previous.as_array()) / dt
        rate = float(np.maximum(r - params.rate_max, params.rate_min - r).max())
    return ControlCheck(box <= tol and rate <= tol, max(box, 0.0), max(rate, 0.0))
