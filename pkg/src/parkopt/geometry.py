"""Planar convex geometry: polytopes, poses, footprints, signed distance.

All quantities are in meters and radians. Polytopes are stored in the dual
halfspace/vertex representation with unit outward normals and counterclockwise
vertex order, which the collision machinery relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_SNAP_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def rotation_matrix(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose. Heading is normalized to (-pi, pi] at construction."""

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.heading)


class ConvexPolytope:
    """Bounded convex polygon with halfspace rows A x <= b and CCW vertices.

    Rows of A are unit outward normals, one per edge, ordered to match the
    vertex ring: row i supports the edge from vertices[i] to vertices[i+1].
    """

    __slots__ = ("A", "b", "vertices")

    def __init__(self, A: np.ndarray, b: np.ndarray, vertices: np.ndarray):
        self.A = np.ascontiguousarray(A, dtype=float)
        self.b = np.ascontiguousarray(b, dtype=float)
        self.vertices = np.ascontiguousarray(vertices, dtype=float)

    @classmethod
    def from_vertices(cls, points) -> "ConvexPolytope":
        """Build from CCW vertices. Raises ValueError on CW order, fewer than
        3 distinct vertices, or a non-convex ring."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("vertices must be an (n, 2) array")
        pts = _dedupe_ring(pts)
        if len(pts) < 3:
            raise ValueError("polytope needs at least 3 distinct vertices")
        area2 = _signed_area2(pts)
        if area2 <= 0.0:
            raise ValueError(
                "vertices must be in counterclockwise order (signed area %.3g)" % (area2 / 2.0)
            )
        n = len(pts)
        for i in range(n):
            p0 = pts[i - 1]
            p1 = pts[i]
            p2 = pts[(i + 1) % n]
            cross = (p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0])
            if cross < -1e-9:
                raise ValueError("vertices do not form a convex polygon (vertex %d)" % i)
        edges = np.roll(pts, -1, axis=0) - pts
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lengths[:, None]
        offsets = np.einsum("ij,ij->i", normals, pts)
        return cls(normals, offsets, pts)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def circumradius(self, center: np.ndarray | None = None) -> float:
        c = self.centroid if center is None else np.asarray(center, dtype=float)
        d = self.vertices - c
        return float(np.hypot(d[:, 0], d[:, 1]).max())

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(self.A @ p <= self.b + tol))

    def support(self, direction: np.ndarray) -> float:
        """Support function: max of direction . x over the polytope."""
        return float((self.vertices @ direction).max())

    def __repr__(self) -> str:
        return "ConvexPolytope(%d vertices)" % len(self.vertices)


def _dedupe_ring(pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    keep = []
    n = len(pts)
    for i in range(n):
        if not keep or np.hypot(*(pts[i] - keep[-1])) > tol:
            keep.append(pts[i])
    if len(keep) > 1 and np.hypot(*(keep[0] - keep[-1])) <= tol:
        keep.pop()
    out = [keep[0]] if keep else []
    for i in range(1, len(keep)):
        p_prev = out[-1]
        p_cur = keep[i]
        p_next = keep[(i + 1) % len(keep)]
        cross = (p_cur[0] - p_prev[0]) * (p_next[1] - p_cur[1]) - (p_cur[1] - p_prev[1]) * (
            p_next[0] - p_cur[0]
        )
        seglen = np.hypot(*(p_next - p_prev))
        if abs(cross) > 1e-12 * max(1.0, seglen):
            out.append(p_cur)
    return np.array(out) if out else pts[:0]


def _signed_area2(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass
class VehicleShape:
    """Rectangular body in the rear-axle frame, {y : G y <= g}.

    The frame origin is the rear axle; the body center sits
    rear_axle_to_center ahead of it along +x.
    """

    G: np.ndarray
    g: np.ndarray
    length: float
    width: float
    rear_axle_to_center: float
    origin_inside: bool = field(default=True)

    @classmethod
    def from_dimensions(
        cls, length: float, width: float, rear_axle_to_center: float
    ) -> "VehicleShape":
        if length <= 0 or width <= 0:
            raise ValueError("length and width must be positive")
        c = float(rear_axle_to_center)
        G = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        g = np.array([c + length / 2.0, length / 2.0 - c, width / 2.0, width / 2.0])
        return cls(G, g, float(length), float(width), c, origin_inside=bool(np.all(g > 0)))

    def body_polytope(self) -> ConvexPolytope:
        c, hl, hw = self.rear_axle_to_center, self.length / 2.0, self.width / 2.0
        verts = np.array(
            [[c + hl, -hw], [c + hl, hw], [c - hl, hw], [c - hl, -hw]]
        )
        return ConvexPolytope.from_vertices(verts)

    @property
    def center_circumradius(self) -> float:
        """Circumradius about the body center."""
        return math.hypot(self.length / 2.0, self.width / 2.0)

    @property
    def inner_radius(self) -> float:
        """Radius of the disc inscribed at the body center."""
        return min(self.length, self.width) / 2.0


def place_footprint(shape: VehicleShape, pose: Pose) -> ConvexPolytope:
    """World-frame body polytope at the given pose.

    Halfspace rows keep unit norm: the transformed system is (G R^T) x <= g + (G R^T) t.
    """
    R = pose.rotation
    t = pose.translation
    A = shape.G @ R.T
    b = shape.g + A @ t
    verts = shape.body_polytope().vertices @ R.T + t
    return ConvexPolytope(A, b, verts)


def _project_extents(poly: ConvexPolytope, axes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    proj = poly.vertices @ axes.T
    return proj.min(axis=0), proj.max(axis=0)


def intersects(p: ConvexPolytope, q: ConvexPolytope) -> bool:
    """Separating-axis test over both polygons' edge normals."""
    axes = np.vstack([p.A, q.A])
    pmin, pmax = _project_extents(p, axes)
    qmin, qmax = _project_extents(q, axes)
    gap = np.maximum(qmin - pmax, pmin - qmax)
    return bool(gap.max() <= 0.0)


def _point_segment_distance_many(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each point to each segment a[j]->b[j]. Shape (npts, nseg)."""
    d = b - a
    denom = np.einsum("ij,ij->i", d, d)
    denom = np.where(denom < 1e-30, 1.0, denom)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pjk,jk->pj", rel, d) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * d[None, :, :]
    diff = points[:, None, :] - closest
    return np.hypot(diff[:, :, 0], diff[:, :, 1])


def distance(p: ConvexPolytope, q: ConvexPolytope) -> float:
    """Euclidean distance between two convex polygons (0 if they intersect)."""
    if intersects(p, q):
        return 0.0
    pa = p.vertices
    qa = q.vertices
    d1 = _point_segment_distance_many(pa, qa, np.roll(qa, -1, axis=0)).min()
    d2 = _point_segment_distance_many(qa, pa, np.roll(pa, -1, axis=0)).min()
    d = min(float(d1), float(d2))
    return 0.0 if d < _SNAP_TOL else d


def penetration(p: ConvexPolytope, q: ConvexPolytope) -> float:
    """Minimum translation depth separating two overlapping convex polygons.

    The minimizing direction for convex polygons is one of the edge normals,
    so the search enumerates both polygons' normals.
    """
    if not intersects(p, q):
        return 0.0
    axes = np.vstack([p.A, q.A])
    pmin, pmax = _project_extents(p, axes)
    qmin, qmax = _project_extents(q, axes)
    overlap = np.minimum(pmax, qmax) - np.maximum(pmin, qmin)
    depth = float(overlap.min())
    return 0.0 if depth < _SNAP_TOL else depth


def signed_distance(p: ConvexPolytope, q: ConvexPolytope) -> float:
    """distance minus penetration; exact zero at touching contact."""
    if intersects(p, q):
        return -penetration(p, q)
    return distance(p, q)


def point_signed_distance(poly: ConvexPolytope, point) -> float:
    """Signed distance from a point to a polygon boundary (negative inside)."""
    pt = np.asarray(point, dtype=float)[None, :]
    a = poly.vertices
    d = float(_point_segment_distance_many(pt, a, np.roll(a, -1, axis=0)).min())
    if poly.contains(pt[0], tol=0.0):
        return -d
    return d


def brute_force_signed_distance(
    p: ConvexPolytope, q: ConvexPolytope, n_directions: int = 3600
) -> float:
    """Dense-direction oracle for signed distance.

    Maximizes the support gap min_q d.q - max_p d.p over sampled unit
    directions. For disjoint polygons this approaches the distance from below;
    for overlapping ones it approaches minus the penetration depth. Intended
    for tests, not production use.
    """
    ang = np.linspace(0.0, 2.0 * math.pi, n_directions, endpoint=False)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    gap = (q.vertices @ dirs.T).min(axis=0) - (p.vertices @ dirs.T).max(axis=0)
    return float(gap.max())
