"""Independent feasibility check for planned trajectories.

The same routine gates the solver's convergence, backs the CLI verify
subcommand, and scores benchmark output, so all three agree on what
"feasible" means:

  * forward-Euler dynamics residual within DYNAMICS_TOL per component,
  * control boxes, rate limits, and time-step bounds satisfied exactly
    (up to float roundoff),
  * footprint clearance at least -CLEARANCE_TOL against every obstacle,
    sampled densely along each step, not just at the knots.

Within one Euler step the pose translates along the fixed step heading,
so dense sampling slides the footprint down that chord at SAMPLE_SPACING
arc increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .geometry import Pose, VehicleShape, place_footprint, signed_distance
from .vehicle import VehicleParams, dynamics_defect

DYNAMICS_TOL = 1e-2
CLEARANCE_TOL = 1e-3
EXACT_TOL = 1e-9
SAMPLE_SPACING = 0.1


@dataclass
class FeasibilityReport:
    ok: bool
    max_dynamics_residual: float
    max_control_violation: float
    max_rate_violation: float
    max_dt_violation: float
    min_clearance: float
    start_error: float
    goal_error: float
    violations: list = field(default_factory=list)

    def summary(self) -> str:
        status = "feasible" if self.ok else "INFEASIBLE"
        lines = [
            "%s: dyn %.3e ctrl %.3e rate %.3e dt %.3e clear %.6f"
            % (status, self.max_dynamics_residual, self.max_control_violation,
               self.max_rate_violation, self.max_dt_violation, self.min_clearance)
        ]
        lines.extend(self.violations)
        return "\n".join(lines)


def sample_poses(states: np.ndarray, dts: np.ndarray,
                 spacing: float = SAMPLE_SPACING) -> np.ndarray:
    """Poses (x, y, heading) swept by the Euler path, densified per step.

    Includes every knot; extra samples are spaced at most `spacing`
    apart along each step's travel chord with the step heading held.
    """
    states = np.asarray(states, dtype=float)
    out = [states[:1, :3]]
    n = len(dts)
    for k in range(n):
        x, y, heading, v = states[k]
        arc = abs(v) * dts[k]
        extra = int(math.ceil(arc / spacing)) if arc > 0 else 1
        tau = np.linspace(0.0, dts[k], extra + 1)[1:]
        seg = np.empty((len(tau), 3))
        seg[:, 0] = x + v * tau * math.cos(heading)
        seg[:, 1] = y + v * tau * math.sin(heading)
        seg[:, 2] = heading
        # land exactly on the next knot so its own heading gets checked too
        seg[-1] = states[k + 1, :3]
        out.append(seg)
    return np.concatenate(out, axis=0)


def min_clearance(states: np.ndarray, dts: np.ndarray, shape: VehicleShape,
                  obstacles, spacing: float = SAMPLE_SPACING) -> float:
    if not obstacles:
        return math.inf
    worst = math.inf
    for x, y, heading in sample_poses(states, dts, spacing):
        foot = place_footprint(shape, Pose(x, y, heading))
        for obs in obstacles:
            sd = signed_distance(foot, obs)
            if sd < worst:
                worst = sd
    return worst


def verify_trajectory(
    states,
    controls,
    dts,
    params: VehicleParams,
    obstacles,
    t_min: float,
    t_max: float,
    start=None,
    goal=None,
    spacing: float = SAMPLE_SPACING,
) -> FeasibilityReport:
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    dts = np.asarray(dts, dtype=float)
    violations: list[str] = []

    defect = dynamics_defect(states, controls, dts, params.wheelbase)
    max_dyn = float(np.abs(defect).max()) if defect.size else 0.0
    if max_dyn > DYNAMICS_TOL:
        k, comp = np.unravel_index(np.abs(defect).argmax(), defect.shape)
        violations.append("dynamics residual %.3e at step %d component %d"
                          % (max_dyn, k, comp))

    box = np.maximum(controls - params.u_max, params.u_min - controls)
    max_ctrl = float(box.max()) if box.size else 0.0
    if max_ctrl > EXACT_TOL:
        k, comp = np.unravel_index(box.argmax(), box.shape)
        violations.append("control bound exceeded by %.3e at step %d component %d"
                          % (max_ctrl, k, comp))

    max_rate = 0.0
    if controls.shape[0] > 1:
        rate = (controls[1:] - controls[:-1]) / dts[:-1, None]
        rv = np.maximum(rate - params.rate_max, params.rate_min - rate)
        max_rate = float(rv.max())
        if max_rate > EXACT_TOL:
            k, comp = np.unravel_index(rv.argmax(), rv.shape)
            violations.append("rate bound exceeded by %.3e between steps %d and %d"
                              % (max_rate, k, k + 1))

    dtv = np.maximum(dts - t_max, t_min - dts)
    max_dt = float(dtv.max()) if dtv.size else 0.0
    if max_dt > EXACT_TOL:
        violations.append("time step outside [%g, %g] by %.3e"
                          % (t_min, t_max, max_dt))

    clearance = min_clearance(states, dts, params.shape, obstacles, spacing)
    if clearance < -CLEARANCE_TOL:
        violations.append("clearance %.6f below -%g" % (clearance, CLEARANCE_TOL))

    start_err = goal_err = 0.0
    if start is not None:
        start_err = float(np.abs(states[0] - np.asarray(start, dtype=float)).max())
        if start_err > EXACT_TOL:
            violations.append("start state off by %.3e" % start_err)
    if goal is not None:
        goal_err = float(np.abs(states[-1] - np.asarray(goal, dtype=float)).max())
        if goal_err > EXACT_TOL:
            violations.append("goal state off by %.3e" % goal_err)

    return FeasibilityReport(
        ok=not violations,
        max_dynamics_residual=max_dyn,
        max_control_violation=max(max_ctrl, 0.0),
        max_rate_violation=max(max_rate, 0.0),
        max_dt_violation=max(max_dt, 0.0),
        min_clearance=clearance,
        start_error=start_err,
        goal_error=goal_err,
        violations=violations,
    )
