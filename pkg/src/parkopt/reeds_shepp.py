"""Shortest bounded-curvature paths with reversing (Reeds-Shepp curves).

Paths are words over segment letters L (left arc), S (straight), R (right
arc) with signed lengths; negative length means driving in reverse.  The
shortest path between two poses is found by enumerating the classical
closed-form candidate families under the time-flip / reflect / backwards
symmetries and keeping the shortest candidate.

Every candidate is validated by integrating its segments and comparing the
endpoint against the target pose; candidates that miss by more than
_CHECK_TOL are discarded.  A formula error therefore degrades to a missed
candidate (caught by the optimality audits in the test suite) instead of a
wrong path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, wrap_angle

_ZERO = 1e-10
_CHECK_TOL = 1e-6
_HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class RsSegment:
    letter: str  # 'L', 'S' or 'R'
    length: float  # canonical (radius-1) units, signed


@dataclass(frozen=True)
class RsPath:
    segments: tuple
    radius: float

    @property
    def length(self) -> float:
        """Total arc length in world units."""
        return self.radius * sum(abs(s.length) for s in self.segments)

    @property
    def n_gear_switches(self) -> int:
        signs = [s.length > 0 for s in self.segments if abs(s.length) > _ZERO]
        return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def _polar(x: float, y: float) -> tuple[float, float]:
    return math.hypot(x, y), math.atan2(y, x)


def _step(x: float, y: float, theta: float, letter: str, length: float):
    """Advance a unit-radius pose along one segment."""
    if letter == "S":
        return x + length * math.cos(theta), y + length * math.sin(theta), theta
    if letter == "L":
        nt = theta + length
        return x + math.sin(nt) - math.sin(theta), y - math.cos(nt) + math.cos(theta), nt
    nt = theta - length
    return x - math.sin(nt) + math.sin(theta), y + math.cos(nt) - math.cos(theta), nt


def _endpoint(word):
    x = y = theta = 0.0
    for letter, length in word:
        x, y, theta = _step(x, y, theta, letter, length)
    return x, y, theta


def _checks_out(word, target) -> bool:
    x, y, theta = _endpoint(word)
    tx, ty, tphi = target
    return (
        abs(x - tx) <= _CHECK_TOL
        and abs(y - ty) <= _CHECK_TOL
        and abs(wrap_angle(theta - tphi)) <= _CHECK_TOL
    )


# Closed-form base families.  Each solver takes the canonical target
# (x, y, phi) and yields words [(letter, signed length), ...] for the
# L-first variant; symmetry transforms generate the rest.


def _lsl(x, y, phi):
    u, t = _polar(x - math.sin(phi), y - 1.0 + math.cos(phi))
    t = wrap_angle(t)
    v = wrap_angle(phi - t)
    if t >= -_ZERO and v >= -_ZERO:
        yield [("L", t), ("S", u), ("L", v)]


def _lsr(x, y, phi):
    u1, t1 = _polar(x + math.sin(phi), y - 1.0 - math.cos(phi))
    if u1 * u1 >= 4.0:
        u = math.sqrt(u1 * u1 - 4.0)
        theta = math.atan2(2.0, u)
        t = wrap_angle(t1 + theta)
        v = wrap_angle(t - phi)
        if t >= -_ZERO and v >= -_ZERO:
            yield [("L", t), ("S", u), ("R", v)]


def _lrl(x, y, phi):
    u1, theta = _polar(x - math.sin(phi), y - 1.0 + math.cos(phi))
    if u1 <= 4.0:
        u = -2.0 * math.asin(0.25 * u1)
        t = wrap_angle(theta + 0.5 * u + math.pi)
        v = wrap_angle(phi - t + u)
        if t >= -_ZERO and u <= _ZERO:
            yield [("L", t), ("R", u), ("L", v)]


def _tau_omega(u, v, xi, eta, phi):
    delta = wrap_angle(u - v)
    A = math.sin(u) - math.sin(delta)
    B = math.cos(u) - math.cos(delta) - 1.0
    t1 = math.atan2(eta * A - xi * B, xi * A + eta * B)
    t2 = 2.0 * (math.cos(delta) - math.cos(v) - math.cos(u)) + 3.0
    tau = wrap_angle(t1 + math.pi) if t2 < 0.0 else wrap_angle(t1)
    return tau, wrap_angle(tau - u + v - phi)


def _lrlr_pm(x, y, phi):
    # L+ R+ L- R- : equal middle arcs, opposite signs
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho = 0.25 * (2.0 + math.hypot(xi, eta))
    if rho <= 1.0:
        u = math.acos(rho)
        t, v = _tau_omega(u, -u, xi, eta, phi)
        if t >= -_ZERO and v <= _ZERO:
            yield [("L", t), ("R", u), ("L", -u), ("R", v)]


def _lrlr_mm(x, y, phi):
    # L+ R- L- R+ : equal middle arcs, same sign
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho = (20.0 - xi * xi - eta * eta) / 16.0
    if 0.0 <= rho <= 1.0:
        u = -math.acos(rho)
        if u >= -_HALF_PI:
            t, v = _tau_omega(u, u, xi, eta, phi)
            if t >= -_ZERO and v >= -_ZERO:
                yield [("L", t), ("R", u), ("L", u), ("R", v)]


def _lrsl(x, y, phi):
    xi = x - math.sin(phi)
    eta = y - 1.0 + math.cos(phi)
    rho, theta = _polar(xi, eta)
    if rho >= 2.0:
        r = math.sqrt(rho * rho - 4.0)
        u = 2.0 - r
        t = wrap_angle(theta + math.atan2(r, -2.0))
        v = wrap_angle(phi - _HALF_PI - t)
        if t >= -_ZERO and u <= _ZERO and v <= _ZERO:
            yield [("L", t), ("R", -_HALF_PI), ("S", u), ("L", v)]


def _lrsr(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho, theta = _polar(-eta, xi)
    if rho >= 2.0:
        t = theta
        u = 2.0 - rho
        v = wrap_angle(t + _HALF_PI - phi)
        if t >= -_ZERO and u <= _ZERO and v <= _ZERO:
            yield [("L", t), ("R", -_HALF_PI), ("S", u), ("R", v)]


def _lrslr(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho, _ = _polar(xi, eta)
    if rho >= 2.0:
        u = 4.0 - math.sqrt(rho * rho - 4.0)
        if u <= _ZERO:
            t = wrap_angle(math.atan2((4.0 - u) * xi - 2.0 * eta, -2.0 * xi + (u - 4.0) * eta))
            v = wrap_angle(t - phi)
            if t >= -_ZERO and v >= -_ZERO:
                yield [("L", t), ("R", -_HALF_PI), ("S", u), ("L", -_HALF_PI), ("R", v)]


_BASES = (_lsl, _lsr, _lrl, _lrlr_pm, _lrlr_mm, _lrsl, _lrsr, _lrslr)
_SWAP = {"L": "R", "R": "L", "S": "S"}


def _candidate_words(x, y, phi):
    """All verified candidate words for the canonical target (x, y, phi)."""
    xb = x * math.cos(phi) + y * math.sin(phi)
    yb = x * math.sin(phi) - y * math.cos(phi)
    # (target handed to the base solver, flip signs?, swap letters?, reverse order?)
    variants = (
        ((x, y, phi), False, False, False),
        ((-x, y, -phi), True, False, False),
        ((x, -y, -phi), False, True, False),
        ((-x, -y, phi), True, True, False),
        ((xb, yb, phi), False, False, True),
        ((-xb, yb, -phi), True, False, True),
        ((xb, -yb, -phi), False, True, True),
        ((-xb, -yb, phi), True, True, True),
    )
    target = (x, y, phi)
    out = []
    for solver in _BASES:
        for (tx, ty, tphi), flip, swap, reverse in variants:
            for word in solver(tx, ty, tphi):
                if flip:
                    word = [(letter, -length) for letter, length in word]
                if swap:
                    word = [(_SWAP[letter], length) for letter, length in word]
                if reverse:
                    word = word[::-1]
                if _checks_out(word, target):
                    out.append(word)
    return out


def solve(start: Pose, goal: Pose, radius: float) -> RsPath:
    """Shortest curvature-bounded path from start to goal.

    The candidate families cover the full shortest-path taxonomy, so a
    path always exists.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    dx = goal.x - start.x
    dy = goal.y - start.y
    c, s = math.cos(start.heading), math.sin(start.heading)
    x = (c * dx + s * dy) / radius
    y = (-s * dx + c * dy) / radius
    phi = wrap_angle(goal.heading - start.heading)
    if abs(x) < _ZERO and abs(y) < _ZERO and abs(phi) < _ZERO:
        return RsPath(segments=(), radius=radius)
    best = None
    best_len = math.inf
    for word in _candidate_words(x, y, phi):
        total = sum(abs(length) for _, length in word)
        if total < best_len - 1e-12:
            best_len = total
            best = word
    segments = tuple(
        RsSegment(letter, length) for letter, length in best if abs(length) > _ZERO
    )
    return RsPath(segments=segments, radius=radius)


def path_length(start: Pose, goal: Pose, radius: float) -> float:
    return solve(start, goal, radius).length


def sample(path: RsPath, start: Pose, spacing: float) -> np.ndarray:
    """Poses along the path every `spacing` meters of arc length.

    Returns an (n, 4) array of rows (x, y, heading, gear) where gear is
    +1.0 forward / -1.0 reverse for the segment the sample lies on.
    Includes the start, every segment boundary, and the endpoint.
    """
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    rows = [(start.x, start.y, start.heading, 1.0)]
    x, y, theta = 0.0, 0.0, 0.0
    c0, s0 = math.cos(start.heading), math.sin(start.heading)
    r = path.radius

    def world(px, py, ptheta, gear):
        wx = start.x + r * (c0 * px - s0 * py)
        wy = start.y + r * (s0 * px + c0 * py)
        return (wx, wy, wrap_angle(start.heading + ptheta), gear)

    for seg in path.segments:
        gear = 1.0 if seg.length >= 0.0 else -1.0
        seg_len = abs(seg.length)
        n = max(1, int(math.ceil(seg_len * r / spacing)))
        for i in range(1, n + 1):
            frac = seg_len * i / n
            px, py, ptheta = _step(x, y, theta, seg.letter, math.copysign(frac, seg.length))
            rows.append(world(px, py, ptheta, gear))
        x, y, theta = _step(x, y, theta, seg.letter, seg.length)
    if path.segments:
        rows[0] = (start.x, start.y, start.heading, 1.0 if path.segments[0].length >= 0 else -1.0)
    return np.array(rows)
