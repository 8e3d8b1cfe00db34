"""Coarse kinematically-feasible path search on a pose lattice.

A* over (x, y, heading, gear) with constant-steering motion primitives and
curvature-bounded analytic goal connections.  The result is a dense,
whole-body collision-free state chain used to seed the trajectory
optimizer: `plan_coarse` finds the geometric path, `assign_speed_profile`
turns it into knot states, controls and time steps whose forward-Euler
rollout reproduces the knots exactly.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import reeds_shepp
from .geometry import ConvexPolytope, Pose, VehicleShape, distance, place_footprint, signed_distance, wrap_angle
from .vehicle import EgoState, VehicleParams


class NoPathFound(RuntimeError):
    pass


class StartInCollision(ValueError):
    pass


class GoalInCollision(ValueError):
    pass


class InfeasibleProfile(ValueError):
    pass


@dataclass
class GridConfig:
    """Search discretization and primitive costs."""

    bounds: tuple  # (xmin, ymin, xmax, ymax)
    xy_resolution: float = 0.2
    heading_resolution: float = math.radians(5.0)
    motion_primitive_arc: float = 0.6
    reverse_penalty: float = 1.6
    direction_switch_penalty: float = 1.2
    steering_set: tuple = ()
    safety_margin: float = 0.05
    node_budget: int = 200_000
    steer_cost: float = 0.3
    steer_change_cost: float = 0.4

    def __post_init__(self):
        if self.xy_resolution <= 0 or self.heading_resolution <= 0:
            raise ValueError("resolutions must be positive")
        if self.reverse_penalty < 1.0:
            raise ValueError("reverse_penalty must be >= 1")
        if self.steering_set:
            arr = np.sort(np.asarray(self.steering_set, dtype=float))
            if np.abs(arr + arr[::-1]).max() > 1e-9:
                raise ValueError("steering_set must be symmetric about 0")

    def steering_values(self, delta_max: float) -> np.ndarray:
        if self.steering_set:
            arr = np.asarray(self.steering_set, dtype=float)
            if np.abs(arr).max() > delta_max + 1e-9:
                raise ValueError("steering_set exceeds the steering limit")
            return arr
        return np.array([-delta_max, -0.5 * delta_max, 0.0, 0.5 * delta_max, delta_max])


@dataclass
class CoarseTrajectory:
    """Dense pose chain with per-state gear (+1 forward, -1 reverse).

    gear[i] is the direction of the motion that arrives at states[i];
    gear[0] copies gear[1].
    """

    states: list
    gear: list
    arc_length: float

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states])


class CollisionChecker:
    """Margin-aware whole-body collision tests against static polytopes.

    Uses a precomputed point-clearance field for cheap accept/reject, a
    vectorized separating-axis pass with margin for the undecided band,
    and exact polytope distance only when both are inconclusive.
    """

    def __init__(self, obstacles, shape: VehicleShape, bounds, margin: float = 0.05,
                 field_resolution: float = 0.1):
        self.obstacles = list(obstacles)
        self.shape = shape
        self.bounds = tuple(bounds)
        self.margin = float(margin)
        body = shape.body_polytope()
        # plain float pairs: the pose filters run these in tight scalar loops
        self._corners_body = [(float(a), float(b)) for a, b in body.vertices]
        self._center_body = body.centroid
        self._r_out = shape.center_circumradius
        self._r_in = shape.inner_radius
        if self.obstacles:
            self._A_all = np.vstack([o.A for o in self.obstacles])
            self._b_all = np.concatenate([o.b for o in self.obstacles])
            face_counts = [len(o.b) for o in self.obstacles]
            self._face_starts = np.concatenate([[0], np.cumsum(face_counts)[:-1]])
        self._build_field(field_resolution)

    def _build_field(self, res: float):
        xmin, ymin, xmax, ymax = self.bounds
        pad = self._r_out + 0.5
        nx = max(2, int(math.ceil((xmax - xmin + 2 * pad) / res)) + 1)
        ny = max(2, int(math.ceil((ymax - ymin + 2 * pad) / res)) + 1)
        self._fx0, self._fy0, self._fres = xmin - pad, ymin - pad, res
        xs = self._fx0 + res * np.arange(nx)
        ys = self._fy0 + res * np.arange(ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        clear = np.full(len(pts), np.inf)
        for obs in self.obstacles:
            d = _points_polytope_distance(pts, obs)
            np.minimum(clear, d, out=clear)
        self._field = clear.reshape(nx, ny)
        # lookup reads the nearest cell; true clearance differs by at most
        # half the cell diagonal
        self._field_slack = res * math.sqrt(2.0) / 2.0

    def point_clearance_bounds(self, x: float, y: float) -> tuple[float, float]:
        """(lower, upper) bounds on the distance from (x, y) to the nearest obstacle."""
        i = int(round((x - self._fx0) / self._fres))
        j = int(round((y - self._fy0) / self._fres))
        nx, ny = self._field.shape
        if i < 0 or j < 0 or i >= nx or j >= ny:
            return 0.0, math.inf
        v = float(self._field[i, j])
        return v - self._field_slack, v + self._field_slack

    def _corners_world(self, x: float, y: float, heading: float) -> np.ndarray:
        c, s = math.cos(heading), math.sin(heading)
        out = np.empty((4, 2))
        for i, (a, b) in enumerate(self._corners_body):
            out[i, 0] = x + a * c - b * s
            out[i, 1] = y + a * s + b * c
        return out

    def in_bounds(self, x: float, y: float, heading: float, tol: float = 1e-9) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        c, s = math.cos(heading), math.sin(heading)
        for a, b in self._corners_body:
            px = x + a * c - b * s
            py = y + a * s + b * c
            if px < xmin - tol or px > xmax + tol or py < ymin - tol or py > ymax + tol:
                return False
        return True

    def pose_ok(self, x: float, y: float, heading: float) -> bool:
        """in_bounds and footprint_margin_ok in one pass."""
        return self.in_bounds(x, y, heading) and self.footprint_margin_ok(x, y, heading)

    def footprint_margin_ok(self, x: float, y: float, heading: float) -> bool:
        """True iff the footprint keeps at least `margin` clearance everywhere."""
        if not self.obstacles:
            return True
        c, s = math.cos(heading), math.sin(heading)
        cx = x + self._center_body[0] * c - self._center_body[1] * s
        cy = y + self._center_body[0] * s + self._center_body[1] * c
        lo, hi = self.point_clearance_bounds(cx, cy)
        if lo >= self._r_out + self.margin:
            return True
        if hi < self._r_in + self.margin:
            return False
        corners = self._corners_world(x, y, heading)
        proj = self._A_all @ corners.T  # (total faces, 4)
        face_gap = proj.min(axis=1) - self._b_all
        gap_obs = np.maximum.reduceat(face_gap, self._face_starts)
        u1 = np.array([c, s])
        u2 = np.array([-s, c])
        undecided = []
        for m, best in enumerate(gap_obs):
            if best < self.margin:
                verts = self.obstacles[m].vertices
                for u in (u1, u2):
                    pc = corners @ u
                    pv = verts @ u
                    best = max(best, pv.min() - pc.max(), pc.min() - pv.max())
                    if best >= self.margin:
                        break
            if best >= self.margin:
                continue
            if best < 0.0:
                return False  # no separating axis: footprints intersect
            undecided.append(m)
        if not undecided:
            return True
        foot = place_footprint(self.shape, Pose(x, y, heading))
        return all(distance(foot, self.obstacles[m]) >= self.margin for m in undecided)

    def footprint_clearance(self, x: float, y: float, heading: float) -> float:
        """Exact min signed distance of the footprint over all obstacles."""
        if not self.obstacles:
            return math.inf
        foot = place_footprint(self.shape, Pose(x, y, heading))
        return min(signed_distance(foot, o) for o in self.obstacles)


def _points_polytope_distance(pts: np.ndarray, poly: ConvexPolytope) -> np.ndarray:
    """Distance from many points to a convex polygon (0 inside)."""
    inside = np.all(pts @ poly.A.T - poly.b <= 0.0, axis=1)
    d = np.full(len(pts), np.inf)
    verts = poly.vertices
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            di = np.linalg.norm(pts - a, axis=1)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            di = np.linalg.norm(pts - proj, axis=1)
        np.minimum(d, di, out=d)
    d[inside] = 0.0
    return d


class _HolonomicField:
    """Obstacle-aware 2-D shortest-path distance to the goal cell."""

    def __init__(self, checker: CollisionChecker, goal: Pose, resolution: float):
        xmin, ymin, xmax, ymax = checker.bounds
        self._res = resolution
        self._x0, self._y0 = xmin, ymin
        nx = int(math.ceil((xmax - xmin) / resolution)) + 1
        ny = int(math.ceil((ymax - ymin) / resolution)) + 1
        free = np.zeros((nx, ny), dtype=bool)
        for i in range(nx):
            for j in range(ny):
                lo, _ = checker.point_clearance_bounds(xmin + i * resolution, ymin + j * resolution)
                free[i, j] = lo >= checker._r_in
        dist = np.full((nx, ny), np.inf)
        gi = min(nx - 1, max(0, int(round((goal.x - xmin) / resolution))))
        gj = min(ny - 1, max(0, int(round((goal.y - ymin) / resolution))))
        free[gi, gj] = True
        dist[gi, gj] = 0.0
        heap = [(0.0, gi, gj)]
        diag = math.sqrt(2.0)
        while heap:
            d, i, j = heapq.heappop(heap)
            if d > dist[i, j]:
                continue
            for di, dj, step in (
                (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
                (1, 1, diag), (1, -1, diag), (-1, 1, diag), (-1, -1, diag),
            ):
                ni, nj = i + di, j + dj
                if 0 <= ni < nx and 0 <= nj < ny and free[ni, nj]:
                    nd = d + step
                    if nd < dist[ni, nj]:
                        dist[ni, nj] = nd
                        heapq.heappush(heap, (nd, ni, nj))
        self._dist = dist * resolution

    def query(self, x: float, y: float) -> float:
        i = int(round((x - self._x0) / self._res))
        j = int(round((y - self._y0) / self._res))
        nx, ny = self._dist.shape
        if i < 0 or j < 0 or i >= nx or j >= ny:
            return math.inf
        # cell-center quantization slack keeps the estimate optimistic
        return max(0.0, float(self._dist[i, j]) - self._res * math.sqrt(2.0))


def _primitive_poses(x, y, heading, steer, direction, arc, wheelbase, sub_arc=0.15):
    """Sample poses along one constant-steering arc (exact integration)."""
    n = max(1, int(math.ceil(arc / sub_arc)))
    out = []
    tan_d = math.tan(steer)
    for i in range(1, n + 1):
        s = direction * arc * i / n
        if abs(tan_d) < 1e-12:
            px = x + s * math.cos(heading)
            py = y + s * math.sin(heading)
            ph = heading
        else:
            R = wheelbase / tan_d
            ph = heading + s / R
            px = x + R * (math.sin(ph) - math.sin(heading))
            py = y - R * (math.cos(ph) - math.cos(heading))
        out.append((px, py, ph))
    return out


def plan_coarse(
    start: Pose,
    goal: Pose,
    obstacles,
    params: VehicleParams,
    grid: GridConfig,
    checker: CollisionChecker | None = None,
) -> CoarseTrajectory:
    """Collision-free coarse path from start to goal.

    Pops lattice nodes ordered by cost plus an admissible heuristic (the
    larger of the obstacle-free curvature-bounded path length and the
    obstacle-aware holonomic grid distance), expands constant-steering
    primitives in both gears, and periodically attempts an exact
    curvature-bounded connection to the goal.
    """
    if checker is None:
        checker = CollisionChecker(obstacles, params.shape, grid.bounds, grid.safety_margin)
    if not checker.in_bounds(start.x, start.y, start.heading) or not checker.footprint_margin_ok(
        start.x, start.y, start.heading
    ):
        raise StartInCollision("start footprint out of bounds or closer than %.3f m" % grid.safety_margin)
    if not checker.in_bounds(goal.x, goal.y, goal.heading) or not checker.footprint_margin_ok(
        goal.x, goal.y, goal.heading
    ):
        raise GoalInCollision("goal footprint out of bounds or closer than %.3f m" % grid.safety_margin)

    # small curvature headroom so optimized trajectories are not pinned at
    # the steering bound through every turn
    delta_eff = 0.95 * min(-params.u_min[0], params.u_max[0])
    steering = grid.steering_values(delta_eff)
    radius = params.wheelbase / math.tan(delta_eff)
    hfield = _HolonomicField(checker, goal, max(grid.xy_resolution, 0.2))
    n_heading_bins = max(1, int(round(2.0 * math.pi / grid.heading_resolution)))

    def cell_of(x, y, heading, gear):
        return (
            int(math.floor(x / grid.xy_resolution)),
            int(math.floor(y / grid.xy_resolution)),
            int(round(wrap_angle(heading) / grid.heading_resolution)) % n_heading_bins,
            gear,
        )

    rs_cache: dict = {}

    def heuristic(x, y, heading):
        # coarser cells than the search lattice: one analytic path length
        # serves a 0.5 m x 15 deg neighborhood
        key = (
            int(math.floor(x * 2.0)),
            int(math.floor(y * 2.0)),
            int(round(wrap_angle(heading) / 0.2618)) % 24,
        )
        h_rs = rs_cache.get(key)
        if h_rs is None:
            h_rs = reeds_shepp.path_length(Pose(x, y, heading), goal, radius)
            rs_cache[key] = h_rs
        return max(h_rs, hfield.query(x, y)), h_rs

    nx_, ny_, nh_, ngear, nparent, nsteer = [start.x], [start.y], [start.heading], [0], [-1], [0.0]
    g_cost = [0.0]
    h0, _ = heuristic(start.x, start.y, start.heading)
    if not math.isfinite(h0):
        raise NoPathFound("goal unreachable in the holonomic relaxation")
    open_heap = [(h0, 0, 0)]
    best_g: dict = {cell_of(start.x, start.y, start.heading, 0): 0.0}
    counter = 1
    pops = 0
    shot_countdown = 0
    goal_node = -1
    rs_tail: np.ndarray | None = None

    while open_heap:
        _, _, idx = heapq.heappop(open_heap)
        pops += 1
        if pops > grid.node_budget:
            raise NoPathFound("node budget exhausted (%d)" % grid.node_budget)
        x, y, heading, gear = nx_[idx], ny_[idx], nh_[idx], ngear[idx]
        key = cell_of(x, y, heading, gear)
        if g_cost[idx] > best_g.get(key, math.inf) + 1e-12:
            continue

        if (
            math.hypot(x - goal.x, y - goal.y) <= 0.1
            and abs(wrap_angle(heading - goal.heading)) <= 0.05
        ):
            goal_node = idx
            rs_tail = None
            break

        # analytic connection attempt on a deterministic schedule
        _, h_rs = heuristic(x, y, heading)
        shot_countdown -= 1
        if shot_countdown <= 0:
            shot_countdown = 1 if h_rs <= 3.0 else max(1, int(h_rs))
            path = reeds_shepp.solve(Pose(x, y, heading), goal, radius)
            samples = reeds_shepp.sample(path, Pose(x, y, heading), 0.15)
            ok = True
            for px, py, ph, _g in samples:
                if not checker.pose_ok(px, py, ph):
                    ok = False
                    break
            if ok:
                goal_node = idx
                rs_tail = samples
                break

        for direction in (1, -1):
            for steer in steering:
                # 0.3 m spacing is enough for collision checks: the swept
                # footprint sags below the chord by far less than the margin
                poses = _primitive_poses(
                    x, y, heading, steer, direction, grid.motion_primitive_arc,
                    params.wheelbase, sub_arc=0.3,
                )
                ok = True
                for px, py, ph in poses:
                    if not checker.pose_ok(px, py, ph):
                        ok = False
                        break
                if not ok:
                    continue
                px, py, ph = poses[-1]
                step_cost = grid.motion_primitive_arc * (1.0 if direction > 0 else grid.reverse_penalty)
                step_cost += grid.steer_cost * abs(steer) * grid.motion_primitive_arc
                step_cost += grid.steer_change_cost * abs(steer - nsteer[idx])
                if gear != 0 and direction != gear:
                    step_cost += grid.direction_switch_penalty
                g_new = g_cost[idx] + step_cost
                nkey = cell_of(px, py, ph, direction)
                if g_new >= best_g.get(nkey, math.inf) - 1e-12:
                    continue
                h_new, _ = heuristic(px, py, ph)
                if not math.isfinite(h_new):
                    continue
                best_g[nkey] = g_new
                nx_.append(px)
                ny_.append(py)
                nh_.append(ph)
                ngear.append(direction)
                nparent.append(idx)
                nsteer.append(float(steer))
                g_cost.append(g_new)
                heapq.heappush(open_heap, (g_new + h_new, counter, len(nx_) - 1))
                counter += 1

    if goal_node < 0:
        raise NoPathFound("open set exhausted")

    chain = []
    idx = goal_node
    while idx >= 0:
        chain.append(idx)
        idx = nparent[idx]
    chain.reverse()
    states = [EgoState(nx_[chain[0]], ny_[chain[0]], nh_[chain[0]], 0.0)]
    gears = [0]
    for prev, cur in zip(chain, chain[1:]):
        poses = _primitive_poses(
            nx_[prev], ny_[prev], nh_[prev], nsteer[cur], ngear[cur], grid.motion_primitive_arc, params.wheelbase
        )
        for px, py, ph in poses:
            states.append(EgoState(px, py, ph, 0.0))
            gears.append(ngear[cur])
    if rs_tail is not None:
        for px, py, ph, g in rs_tail[1:]:
            states.append(EgoState(px, py, ph, 0.0))
            gears.append(1 if g > 0 else -1)
    if len(states) < 2:
        # start already satisfies the goal tolerance; emit a two-state dwell
        states.append(states[0])
        gears.append(1)
    if gears[0] == 0:
        gears[0] = gears[1]
    pos = np.array([[s.x, s.y] for s in states])
    arc = float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))
    return CoarseTrajectory(states=states, gear=gears, arc_length=arc)


@dataclass
class WarmStart:
    """Knot-level initial iterate; rollout of (controls, dts) hits states exactly."""

    states: np.ndarray  # (N+1, 4): x, y, heading, v
    controls: np.ndarray  # (N, 2): steering, accel
    dts: np.ndarray  # (N,)
    gear: np.ndarray  # (N,) sign of commanded motion per step (0 for dwell)


def _split_gear_segments(path: CoarseTrajectory):
    """Maximal constant-gear runs as (deduped points, cumulative arc, gear)."""
    pos = path.positions()
    bounds = []
    seg_start = 0
    for i in range(2, len(path.states)):
        if path.gear[i] != path.gear[i - 1]:
            bounds.append((seg_start, i - 1))
            seg_start = i - 1
    bounds.append((seg_start, len(path.states) - 1))
    out = []
    for a, b in bounds:
        pts = pos[a : b + 1]
        keep = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
                keep.append(i)
        pts = pts[keep]
        if len(pts) < 2:
            continue
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        out.append((pts, cum, path.gear[b]))
    return out


def _interp_along(pts: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    s = min(max(s, 0.0), float(cum[-1]))
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(pts) - 2)
    span = cum[i + 1] - cum[i]
    w = 0.0 if span < 1e-12 else (s - cum[i]) / span
    return pts[i] * (1.0 - w) + pts[i + 1] * w


def assign_speed_profile(
    path: CoarseTrajectory,
    params: VehicleParams,
    v_cruise: float,
    n_steps: int = 40,
    t_min: float = 0.05,
    t_max: float = 0.5,
    goal_heading: float | None = None,
) -> WarmStart:
    """Time-parameterize a coarse path into an exactly-consistent warm start.

    Each gear segment is resampled on a ladder of chord lengths that ramps
    up and back down within the acceleration budget; one dwell step
    (v = 0) opens every segment so velocity is zero at the start and at
    every gear switch, and leftover horizon steps park at the goal.
    Headings are set to chord directions and steering is recovered by
    inverting the heading update, which makes the forward-Euler rollout
    land on every knot exactly.
    """
    if not path.states:
        raise InfeasibleProfile("empty path")
    segments = _split_gear_segments(path)
    if not segments:
        raise InfeasibleProfile("path has no net motion")
    a_use = 0.8 * params.u_max[1]
    dt_move = t_max

    # entering and leaving a dwell jumps the speed by v_floor in one step,
    # which costs a_use exactly; the floor also keeps moving chords at
    # least as long as the coarse polyline spacing
    v_floor = min(max(v_cruise, 1e-3), a_use * dt_move)
    ell_f = v_floor * dt_move
    ell_c = max(max(v_cruise, 1e-3) * dt_move, ell_f)
    ramp = a_use * dt_move**2  # max chord-to-chord growth within accel limits
    stretch = params.u_max[1] / a_use  # headroom left for over-packing chords

    def ladder(S, n_c=None):
        """Symmetric chord-length ladder summing exactly to S.

        Shortest chords sit at both ends so speed ramps from and back to
        the dwell jump.  With n_c given, the ladder is scaled to fit; the
        scale may exceed 1 only as far as the acceleration headroom allows.
        """
        if S <= ell_f and n_c in (None, 1):
            return [S]
        if n_c is None:
            n_c = 1
            while True:
                n_c += 1
                raw = [
                    min(ell_c, ell_f + ramp * i, ell_f + ramp * (n_c - 1 - i))
                    for i in range(n_c)
                ]
                if sum(raw) >= S:
                    break
        else:
            raw = [
                min(ell_c, ell_f + ramp * i, ell_f + ramp * (n_c - 1 - i))
                for i in range(n_c)
            ]
        f = S / sum(raw)
        if f > stretch + 1e-9:
            return None
        return [f * r for r in raw]

    seg_lengths = [float(cum[-1]) for _, cum, _ in segments]
    chords_per_seg = [ladder(S) for S in seg_lengths]
    while sum(len(c) + 1 for c in chords_per_seg) > n_steps:
        # over budget: re-pack the largest segment into one fewer chord
        order = sorted(range(len(segments)), key=lambda j: -len(chords_per_seg[j]))
        for j in order:
            if len(chords_per_seg[j]) <= 1:
                continue
            trial = ladder(seg_lengths[j], len(chords_per_seg[j]) - 1)
            if trial is not None:
                chords_per_seg[j] = trial
                break
        else:
            raise InfeasibleProfile(
                "horizon too short: path needs %d steps, budget %d"
                % (sum(len(c) + 1 for c in chords_per_seg), n_steps)
            )

    knots = [segments[0][0][0]]
    zero_step = []  # True where the step must not move (dwell)
    gear_steps = []
    dts = []
    for (pts, cum, gear), chords in zip(segments, chords_per_seg):
        knots.append(pts[0])  # dwell: duplicate the segment entry knot
        zero_step.append(True)
        gear_steps.append(0)
        dts.append(dt_move)
        s = 0.0
        for ell in chords:
            s += ell
            knots.append(_interp_along(pts, cum, s))
            zero_step.append(False)
            gear_steps.append(gear)
            dts.append(dt_move)
    while len(dts) < n_steps:  # park at the end of the horizon
        knots.append(knots[-1])
        zero_step.append(True)
        gear_steps.append(0)
        dts.append(t_min)
    N = n_steps
    knots = np.asarray(knots)
    dts = np.asarray(dts, dtype=float)
    chords = np.diff(knots, axis=0)
    lengths = np.linalg.norm(chords, axis=1)
    # degenerate chords behave like dwells (no displacement, no turning)
    for k in range(N):
        if lengths[k] < 1e-12:
            zero_step[k] = True
            gear_steps[k] = 0

    chord_heading = np.full(N, math.nan)
    for k in range(N):
        if not zero_step[k]:
            raw = math.atan2(chords[k][1], chords[k][0])
            if gear_steps[k] < 0:
                raw += math.pi
            chord_heading[k] = raw
    # dwell steps hold the next chord's heading; trailing dwells hold the goal's
    tail = goal_heading if goal_heading is not None else path.states[-1].heading
    next_valid = tail
    for k in range(N - 1, -1, -1):
        if math.isnan(chord_heading[k]):
            chord_heading[k] = next_valid
        else:
            next_valid = chord_heading[k]

    L = params.wheelbase
    states = np.zeros((N + 1, 4))
    controls = np.zeros((N, 2))
    states[:, 0] = knots[:, 0]
    states[:, 1] = knots[:, 1]
    # moving steps displace along the stored heading, so each moving knot's
    # heading must be its chord's direction; dwell steps cannot turn, so
    # they copy the heading of the step that follows
    heading = np.zeros(N + 1)
    heading[0] = path.states[0].heading + wrap_angle(chord_heading[0] - path.states[0].heading)
    for k in range(N):
        target = chord_heading[k + 1] if k + 1 < N else tail
        heading[k + 1] = heading[k] + wrap_angle(target - heading[k])
    for k in range(N - 1, -1, -1):
        if zero_step[k]:
            heading[k] = heading[k + 1]
    states[:, 2] = heading

    for k in range(N):
        states[k, 3] = 0.0 if zero_step[k] else gear_steps[k] * lengths[k] / dts[k]
    states[N, 3] = 0.0
    # invert the heading update for steering; isolated chords at sharp
    # polyline corners can demand steering beyond the box bounds, which the
    # optimizer projects out on its first sweep
    for k in range(N):
        vt = states[k, 3] * dts[k]
        dphi = heading[k + 1] - heading[k]
        controls[k, 0] = 0.0 if abs(vt) < 1e-12 else math.atan(L * dphi / vt)
        controls[k, 1] = (states[k + 1, 3] - states[k, 3]) / dts[k]
    return WarmStart(states=states, controls=controls, dts=dts, gear=np.asarray(gear_steps))
