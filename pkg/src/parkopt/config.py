"""Planner weight and solver configuration containers.

Both dataclasses validate on construction so that scenario files and
programmatic callers fail early with a message naming the bad field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
import math


class ConfigError(ValueError):
    """A weight or solver parameter outside its allowed range."""


@dataclass
class PlannerWeights:
    """Objective weights for the trajectory cost.

    w_x       tracking of the reference states
    w_u       control effort (steering, accel)
    w_x_rate  successive-state smoothing, scaled by 1/dt
    w_u_rate  deviation from previous-cycle controls, scaled by 1/dt
    w_d       exponential clearance penalty sum(exp(d))
    beta      cone-relaxation penalty for the dual warm-start QP
    """

    w_x: float = 1.0
    w_u: float = 1.0
    w_x_rate: float = 0.1
    w_u_rate: float = 0.0
    w_d: float = 0.2
    beta: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            val = getattr(self, f.name)
            if not math.isfinite(val):
                raise ConfigError("%s must be finite, got %r" % (f.name, val))
            if val < 0.0:
                raise ConfigError("%s must be nonnegative, got %r" % (f.name, val))
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive, got %r" % self.beta)


@dataclass
class SolverConfig:
    """Knobs for the splitting solver and its warm start.

    Residual thresholds compare the *sum of squared* primal residuals
    against eps_pri and the sum of squared consecutive multiplier
    differences against eps_dual, both with closed (<=) comparisons.
    """

    rho: float = 1.0
    eps_pri: float = 1e-3
    eps_dual: float = 1e-3
    max_outer_iterations: int = 150
    sqp_inner_iterations: int = 3
    t_min: float = 0.05
    t_max: float = 0.5
    horizon: int = 40
    parallelism: int = 1
    eps_clear: float = 0.01
    safety_margin: float = 0.05
    v_cruise: float = 1.5
    pin_goal: bool = True
    warmstart_duals: bool = False
    adapt_rho: bool = True
    rho_max: float = 256.0
    trust_heading: float = 0.3
    trust_steering: float = 0.2
    trust_clearance: float = 1.0

    def __post_init__(self) -> None:
        positive = (
            "rho",
            "eps_pri",
            "eps_dual",
            "t_min",
            "t_max",
            "v_cruise",
            "trust_heading",
            "trust_steering",
            "trust_clearance",
            "rho_max",
        )
        for name in positive:
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0.0):
                raise ConfigError("%s must be positive and finite, got %r" % (name, val))
        for name in ("eps_clear", "safety_margin"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0.0):
                raise ConfigError("%s must be nonnegative, got %r" % (name, val))
        if self.t_min > self.t_max:
            raise ConfigError("t_min %r exceeds t_max %r" % (self.t_min, self.t_max))
        for name in ("max_outer_iterations", "sqp_inner_iterations", "horizon", "parallelism"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError("%s must be a positive integer, got %r" % (name, val))


def weights_from_dict(data: dict) -> PlannerWeights:
    return _from_dict(PlannerWeights, data, "weights")


def solver_from_dict(data: dict) -> SolverConfig:
    return _from_dict(SolverConfig, data, "solver")


def _from_dict(cls, data: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("%s: unknown fields %s" % (label, ", ".join(unknown)))
    return cls(**data)
