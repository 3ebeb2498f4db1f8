"""Planar convex bodies described by their support functions.

A compact convex set ``T`` of the plane is determined by its support
function ``sigma_T(u) = max_{x in T} <x, u>`` on unit directions.  All
bodies below evaluate the support function in closed form at an array of
angles, which makes membership, distances and Hausdorff distances a
one-dimensional maximisation over the circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import ConvexHull

TWO_PI = 2.0 * math.pi
DEFAULT_GRID = 2048

__all__ = [
    "UnitDirection",
    "ConvexBody",
    "Disk",
    "PolygonArc",
    "PointHull",
    "Blend",
    "GridBody",
    "direction_grid",
    "support",
    "hausdorff_dist",
    "contains",
    "dist_to_body",
]


@dataclass(frozen=True)
class UnitDirection:
    """Unit vector ``(cos angle, sin angle)`` with ``angle`` in ``[0, 2 pi)``."""

    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)

    @property
    def vector(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    @classmethod
    def from_vector(cls, v) -> "UnitDirection":
        v = np.asarray(v, dtype=float)
        if not np.any(v):
            raise ValueError("zero vector has no direction")
        return cls(math.atan2(v[1], v[0]))


def direction_grid(N: int) -> np.ndarray:
    """Return ``N`` uniformly spaced angles starting at 0."""
    return TWO_PI * np.arange(N) / N


def _as_angle(u):
    if isinstance(u, UnitDirection):
        return u.angle
    arr = np.asarray(u, dtype=float)
    if arr.shape == (2,):
        return math.atan2(arr[1], arr[0])
    return arr


class ConvexBody:
    """Base class.  Subclasses implement :meth:`support` on angles."""

    kind = "body"

    def support(self, theta):
        raise NotImplementedError

    def breakpoints(self) -> np.ndarray:
        """Angles where the support function may fail to be smooth."""
        return np.empty(0)

    def _scalar_or_array(self, theta, values):
        return float(values) if np.ndim(theta) == 0 else values


@dataclass(frozen=True)
class Disk(ConvexBody):
    radius: float
    center: tuple = (0.0, 0.0)

    kind = "disk"

    def support(self, theta):
        th = np.asarray(theta, dtype=float)
        val = self.center[0] * np.cos(th) + self.center[1] * np.sin(th) + self.radius
        return self._scalar_or_array(theta, val)

    def support_point(self, theta):
        th = float(theta)
        return np.array(self.center) + self.radius * np.array([math.cos(th), math.sin(th)])


@dataclass(frozen=True)
class PolygonArc(ConvexBody):
    """Convex hull of ``m`` consecutive edges of a regular ``n``-gon plus an arc.

    The vertices are ``rho * exp(2 pi i j / n)`` for ``j = 0..m`` and the
    rest of the boundary is the arc of the circle of radius ``rho`` over
    the angles ``[2 pi m / n, 2 pi]``.  ``m = 0`` is the full disk and
    ``m = n`` the full polygon.
    """

    n: int
    m: int
    rho: float

    kind = "ring"

    def __post_init__(self):
        if self.n < 2 or not 0 <= self.m <= self.n:
            raise ValueError(f"invalid ring parameters n={self.n}, m={self.m}")

    def support(self, theta):
        th = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        step = TWO_PI / self.n
        j = np.clip(np.rint(th / step), 0, self.m)
        val = np.where(th >= self.m * step, self.rho, self.rho * np.cos(th - j * step))
        return self._scalar_or_array(theta, val)

    def breakpoints(self):
        return math.pi * (2 * np.arange(self.m) + 1) / self.n

    def vertices(self) -> np.ndarray:
        ang = TWO_PI * np.arange(self.m + 1) / self.n
        return self.rho * np.column_stack([np.cos(ang), np.sin(ang)])

    def support_point(self, theta):
        """A point of the body attaining the support value at ``theta``."""
        th = float(theta) % TWO_PI
        step = TWO_PI / self.n
        if th >= self.m * step:
            return self.rho * np.array([math.cos(th), math.sin(th)])
        j = min(max(round(th / step), 0), self.m)
        return self.rho * np.array([math.cos(j * step), math.sin(j * step)])


class PointHull(ConvexBody):
    """Convex hull of a finite point set."""

    kind = "hull"

    def __init__(self, points):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self._bp = _hull_edge_normals(self.points)

    def support(self, theta):
        th = np.asarray(theta, dtype=float)
        u = np.stack([np.cos(th), np.sin(th)], axis=-1)
        val = np.max(u @ self.points.T, axis=-1)
        return self._scalar_or_array(theta, val)

    def breakpoints(self):
        return self._bp

    def support_point(self, theta):
        u = np.array([math.cos(theta), math.sin(theta)])
        return self.points[int(np.argmax(self.points @ u))]


def _hull_edge_normals(points):
    if len(points) < 3:
        if len(points) == 2:
            d = points[1] - points[0]
            a = math.atan2(-d[0], d[1])
            return np.mod(np.array([a, a + math.pi]), TWO_PI)
        return np.empty(0)
    try:
        hull = ConvexHull(points)
    except Exception:  # collinear input
        return np.empty(0)
    v = points[hull.vertices]
    d = np.roll(v, -1, axis=0) - v
    # hull vertices are counter-clockwise, outward normal is d rotated by -90 degrees
    return np.mod(np.arctan2(-d[:, 0], d[:, 1]), TWO_PI)


@dataclass(frozen=True)
class Blend(ConvexBody):
    """Minkowski combination ``t A + (1 - t) B``."""

    a: ConvexBody
    b: ConvexBody
    t: float

    kind = "blend"

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("blend weight must lie in [0, 1]")

    def support(self, theta):
        return self.t * self.a.support(theta) + (1.0 - self.t) * self.b.support(theta)

    def breakpoints(self):
        return np.concatenate([self.a.breakpoints(), self.b.breakpoints()])


class GridBody(ConvexBody):
    """Body known through support values on a uniform direction grid.

    Off the grid the support function of the circumscribed polygon (the
    intersection of the ``N`` supporting half-planes) is returned.
    """

    kind = "grid"

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)
        N = len(self.values)
        if N < 3:
            raise ValueError("need at least three support values")
        self.angles = direction_grid(N)
        a0, a1 = self.angles, np.roll(self.angles, -1)
        h0, h1 = self.values, np.roll(self.values, -1)
        det = np.sin(a1 - a0)
        x = (h0 * np.sin(a1) - h1 * np.sin(a0)) / det
        y = (h1 * np.cos(a0) - h0 * np.cos(a1)) / det
        self.vertices = np.column_stack([x, y])

    @classmethod
    def from_support(cls, body: ConvexBody, N: int = DEFAULT_GRID) -> "GridBody":
        return cls(body.support(direction_grid(N)))

    @classmethod
    def from_points(cls, points, N: int = DEFAULT_GRID) -> "GridBody":
        pts = np.asarray(points, dtype=float)
        th = direction_grid(N)
        u = np.column_stack([np.cos(th), np.sin(th)])
        return cls(np.max(u @ pts.T, axis=1))

    def support(self, theta):
        th = np.asarray(theta, dtype=float)
        u = np.stack([np.cos(th), np.sin(th)], axis=-1)
        val = np.max(u @ self.vertices.T, axis=-1)
        return self._scalar_or_array(theta, val)

    def breakpoints(self):
        return self.angles


def support(body: ConvexBody, u) -> float:
    """Support value of ``body`` in direction ``u``.

    ``u`` may be a :class:`UnitDirection`, an angle or a 2-vector (which
    is normalised).
    """
    return body.support(_as_angle(u))


def _refined_max(fun, N, extra=()):
    """Maximise ``fun`` over the circle.

    ``fun`` maps an array of angles to values.  The uniform grid of size
    ``N`` is augmented by ``extra`` angles, then a bounded Brent search
    refines the best candidate within one grid cell on each side.
    Returns ``(value, angle)``.
    """
    if N < 64:
        raise ValueError("direction grid must have at least 64 points")
    th = direction_grid(N)
    extra = np.asarray(extra, dtype=float)
    if extra.size:
        th = np.concatenate([th, np.mod(extra, TWO_PI)])
    vals = fun(th)
    i = int(np.argmax(vals))
    best, arg = float(vals[i]), float(th[i])
    width = TWO_PI / N
    res = minimize_scalar(
        lambda t: -float(fun(np.array([t]))[0]),
        bounds=(arg - width, arg + width),
        method="bounded",
        options={"xatol": 1e-13},
    )
    if -res.fun > best:
        best, arg = float(-res.fun), float(res.x) % TWO_PI
    return best, arg


def hausdorff_dist(A: ConvexBody, B: ConvexBody, N: int = DEFAULT_GRID) -> float:
    """Hausdorff distance as the sup-norm of the support difference."""

    def gap(th):
        return np.abs(A.support(th) - B.support(th))

    extra = np.concatenate([A.breakpoints(), B.breakpoints()])
    return _refined_max(gap, N, extra)[0]


def max_violation(body: ConvexBody, x, N: int = DEFAULT_GRID):
    """Return ``max_u <x,u> - sigma(u)`` and the maximising angle."""
    x = np.asarray(x, dtype=float)

    def viol(th):
        return x[0] * np.cos(th) + x[1] * np.sin(th) - body.support(th)

    return _refined_max(viol, N, body.breakpoints())


def contains(body: ConvexBody, x, N: int = DEFAULT_GRID) -> bool:
    return max_violation(body, x, N)[0] <= 1e-12


def dist_to_body(x, body: ConvexBody, N: int = DEFAULT_GRID) -> float:
    """Euclidean distance from ``x`` to the convex body (0 inside)."""
    return max(0.0, max_violation(body, x, N)[0])
