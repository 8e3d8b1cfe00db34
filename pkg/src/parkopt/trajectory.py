"""Planned trajectory container, solve diagnostics, and columnar text IO."""

from __future__ import annotations

from dataclasses import dataclass, field
import io

import numpy as np

_COLUMNS = ("k", "t", "x", "y", "heading", "v", "steering", "accel", "clearance")


class TrajectoryFormatError(ValueError):
    """Malformed trajectory text: bad header, ragged rows, or non-numbers."""


@dataclass
class IterationRecord:
    """Per-outer-iteration diagnostics emitted by the solver."""

    index: int
    primal_sq: float
    dual_sq: float
    objective: float
    augmented_lagrangian: float
    rho: float
    block_times: dict = field(default_factory=dict)
    sqp_stalled: bool = False


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    primal_sq: float
    dual_sq: float
    objective: float
    solve_time: float
    warm_start_time: float = 0.0
    block_times: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


@dataclass
class PlannedTrajectory:
    """States (N+1,4), controls (N,2), per-step durations (N,).

    clearances holds the per-knot certified distance floor (min over
    obstacles); gear holds the warm-start travel direction per step
    (+1 forward, -1 reverse, 0 dwell).
    """

    states: np.ndarray
    controls: np.ndarray
    dts: np.ndarray
    clearances: np.ndarray
    gear: np.ndarray
    report: SolveReport | None = None

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        self.dts = np.asarray(self.dts, dtype=float)
        self.clearances = np.asarray(self.clearances, dtype=float)
        self.gear = np.asarray(self.gear, dtype=int)
        n = self.controls.shape[0]
        if self.states.shape != (n + 1, 4):
            raise ValueError("states shape %s does not match %d controls" % (self.states.shape, n))
        if self.dts.shape != (n,) or self.gear.shape != (n,):
            raise ValueError("dts/gear must have one entry per control step")
        if self.clearances.shape != (n + 1,):
            raise ValueError("clearances must have one entry per knot")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def duration(self) -> float:
        return float(self.dts.sum())

    def knot_times(self) -> np.ndarray:
        """Absolute time of each knot, starting at zero."""
        out = np.zeros(self.horizon + 1)
        np.cumsum(self.dts, out=out[1:])
        return out


def format_trajectory(traj: PlannedTrajectory) -> str:
    """Columnar text with full float precision; row k pairs knot k with
    the controls applied over the following step (blank on the last row)."""
    buf = io.StringIO()
    buf.write("# " + " ".join(_COLUMNS) + "\n")
    n = traj.horizon
    for k in range(n + 1):
        x, y, heading, v = traj.states[k]
        if k < n:
            steer, accel = traj.controls[k]
            tk = traj.dts[k]
        else:
            steer = accel = tk = float("nan")
        row = (float(tk), float(x), float(y), float(heading), float(v),
               float(steer), float(accel), float(traj.clearances[k]))
        buf.write("%d " % k + " ".join("%.17g" % val for val in row))
        buf.write("\n")
    return buf.getvalue()


def save_trajectory(path, traj: PlannedTrajectory) -> None:
    with open(path, "w") as fh:
        fh.write(format_trajectory(traj))


def parse_trajectory(text: str) -> PlannedTrajectory:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise TrajectoryFormatError("missing header line")
    header = tuple(lines[0].lstrip("#").split())
    if header != _COLUMNS:
        raise TrajectoryFormatError("header %s != %s" % (header, _COLUMNS))
    rows = []
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != len(_COLUMNS):
            raise TrajectoryFormatError("row %d has %d fields, expected %d"
                                        % (i, len(parts), len(_COLUMNS)))
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise TrajectoryFormatError("row %d: %s" % (i, exc)) from None
    data = np.array(rows)
    if data.shape[0] < 2:
        raise TrajectoryFormatError("need at least two knots")
    if not np.array_equal(data[:, 0], np.arange(data.shape[0])):
        raise TrajectoryFormatError("knot indices must be 0..N in order")
    n = data.shape[0] - 1
    states = data[:, 2:6]
    controls = data[:-1, 6:8]
    dts = data[:-1, 1]
    clearances = data[:, 8]
    gear = np.sign(states[:-1, 3]).astype(int)
    return PlannedTrajectory(states=states, controls=controls, dts=dts,
                             clearances=clearances, gear=gear)


def load_trajectory(path) -> PlannedTrajectory:
    with open(path) as fh:
        return parse_trajectory(fh.read())
