"""A convex function on the plane whose sublevel sets are prescribed rings.

The construction has three layers.

1. :func:`build_rings` produces a strictly decreasing sequence of convex
   bodies ``T_0 > T_1 > ...``: the unit disk followed, for each generation
   ``n >= 3``, by the hulls of ``m`` edges of a regular ``n``-gon completed
   by a circular arc (``m = 1..n``) and by the disk of the next generation
   radius.  The bodies shrink to a disk of radius ``r > 0`` while the sum
   of consecutive Hausdorff distances diverges.
2. :func:`assign_levels` attaches decreasing values ``lambda_k`` through
   ``K_k (lambda_k - lambda_{k+1}) = (lambda_{k-1} - lambda_k) / 2`` with
   ``K_k`` the largest support-gap ratio of three consecutive bodies.
3. :class:`CexFunction` evaluates the convex function whose sublevel set
   at ``lambda_k`` is ``T_k``, by linear interpolation of support
   functions between consecutive levels.

Level gaps shrink by a factor ``2 K_k`` (between 50 and 350) per body, so
they leave the double precision range after a few hundred bodies.  Gaps
and excesses ``lambda_k - lambda_inf`` are therefore stored as logarithms
and the evaluator works with the *level coordinate* ``c(x)``: ``c = k``
on the boundary of ``T_k``, ``c = k + 1 - s`` inside the band between
``T_k`` and ``T_{k+1}`` and ``c = -dist(x, T_0)`` outside ``T_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import Degenerate, RangeError, UndefinedAtMin
from .geometry import TWO_PI, Disk, PolygonArc, direction_grid

__all__ = [
    "mu",
    "RingParams",
    "generation_radii",
    "limit_radius",
    "NestedBodies",
    "build_rings",
    "generation_dist_sum",
    "generation_dist_closed_form",
    "torralba_K",
    "PrescribedLevels",
    "assign_levels",
    "CexFunction",
    "eval_cex",
    "grad_cex",
    "kl_failure_witness",
    "cex_field",
]

N_MAX_LIMIT = 200
_TAIL_TERMS = 1_000_000


def mu(n: int) -> float:
    """Per-generation shrink factor ``1 - 1/n^3``."""
    return 1.0 - 1.0 / n ** 3


def _log_ratio(n):
    """``log(R_{n+1} / R_n)`` for integer array ``n``."""
    n = np.asarray(n, dtype=float)
    # log cos x = log1p(-2 sin^2(x/2)) keeps full precision for small x
    return (n + 1.0) * np.log1p(-1.0 / n ** 3) + np.log1p(-2.0 * np.sin(np.pi / (2.0 * n)) ** 2)


def generation_radii(n_max: int) -> np.ndarray:
    """Array ``R`` with ``R[n]`` the generation radius, ``3 <= n <= n_max + 1``.

    Entries below index 3 are ``nan``.
    """
    R = np.full(n_max + 2, np.nan)
    logs = np.concatenate([[0.0], np.cumsum(_log_ratio(np.arange(3, n_max + 1)))])
    R[3:] = np.exp(logs)
    return R


def limit_radius(n_max: int) -> float:
    """``lim R_n`` from ``R_{n_max+1}`` and the tail of the log-product.

    The tail is summed exactly over a million terms.  The remainder uses
    ``log(R_{n+1}/R_n) = -a/n^2 - 1/n^3 + O(n^-4)`` with ``a = 1 + pi^2/2``,
    whose sum over ``n > N`` is ``-a/N + (a - 1)/(2 N^2) + O(N^-3)``.
    """
    R = generation_radii(n_max)
    n = np.arange(n_max + 1, n_max + 1 + _TAIL_TERMS)
    tail = math.fsum(_log_ratio(n)[::-1])
    N_end = float(n[-1])
    a = 1.0 + math.pi ** 2 / 2.0
    tail += -a / N_end + (a - 1.0) / (2.0 * N_end ** 2)
    return float(R[n_max + 1] * math.exp(tail))


@dataclass(frozen=True)
class RingParams:
    """Parameters of the ring ``C_{n,m}``."""

    n: int
    m: int
    R: float

    def __post_init__(self):
        if self.n < 3 or not 1 <= self.m <= self.n + 1:
            raise ValueError(f"invalid ring ({self.n}, {self.m})")

    @property
    def mu(self) -> float:
        return mu(self.n)

    @property
    def rho(self) -> float:
        """Radius of the ring; the last stage is the next generation disk."""
        if self.m == self.n + 1:
            return self.mu ** (self.n + 1) * self.R * math.cos(math.pi / self.n)
        return self.mu ** self.m * self.R


class NestedBodies:
    """Strictly decreasing sequence of rings stored as parallel arrays.

    Body ``k`` is described by ``(n[k], m[k], rho[k])``; ``m = 0`` encodes
    a centred disk.  One extra entry, index ``K + 1``, holds the limit
    disk of radius ``r`` so that band arithmetic never runs off the end.

    Parameters
    ----------
    n, m, rho : array_like
        Ring parameters of the bodies ``T_0..T_K``.
    limit : float
        Radius of the limit disk contained in every body.
    labels : list of tuple, optional
        ``(n, m)`` names of the bodies.
    R : ndarray, optional
        Generation radii, indexed by generation.
    """

    def __init__(self, n, m, rho, limit, labels=None, R=None):
        self.n = np.append(np.asarray(n, dtype=np.int64), 1)
        self.m = np.append(np.asarray(m, dtype=np.int64), 0)
        self.rho = np.append(np.asarray(rho, dtype=float), float(limit))
        self.n[self.m == 0] = 1
        self.limit = float(limit)
        self.labels = list(labels) if labels is not None else None
        self.R = R
        self._index = {lab: i for i, lab in enumerate(self.labels)} if labels else {}
        self._tables = {}

    @classmethod
    def concentric(cls, radii, limit=0.0):
        """Chain of centred disks with the given decreasing radii."""
        radii = np.asarray(radii, dtype=float)
        return cls(np.ones(len(radii)), np.zeros(len(radii)), radii, limit)

    def __len__(self):
        return len(self.rho) - 1

    @property
    def last(self) -> int:
        """Index ``K`` of the last built body."""
        return len(self) - 1

    def body(self, k: int):
        """Body ``k`` as a :class:`~kllab.geometry.ConvexBody`; ``K+1`` is the limit."""
        if not 0 <= k <= len(self):
            raise RangeError(f"body index {k} outside 0..{len(self)}")
        if self.m[k] == 0:
            return Disk(float(self.rho[k]))
        return PolygonArc(int(self.n[k]), int(self.m[k]), float(self.rho[k]))

    def bodies(self):
        return [self.body(k) for k in range(len(self))]

    def index_of(self, n: int, m: int) -> int:
        try:
            return self._index[(n, m)]
        except KeyError:
            raise RangeError(f"ring ({n}, {m}) not built") from None

    def generations(self):
        return sorted({lab[0] for lab in self.labels[1:]}) if self.labels else []

    def support(self, k, theta):
        """Vectorised support of bodies ``k`` (array) at angles ``theta``."""
        k = np.asarray(k)
        th = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        n, m, rho = self.n[k], self.m[k], self.rho[k]
        step = TWO_PI / n
        j = np.clip(np.rint(th / step), 0, m)
        return np.where(th >= m * step, rho, rho * np.cos(th - j * step))

    def support_point(self, k, theta):
        """Vectorised point of body ``k`` attaining the support value."""
        k = np.asarray(k)
        th = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        n, m, rho = self.n[k], self.m[k], self.rho[k]
        step = TWO_PI / n
        j = np.clip(np.rint(th / step), 0, m)
        ang = np.where(th >= m * step, th, j * step)
        return rho[..., None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def normal_cone(self, k: int, theta: float):
        """Angular interval of directions sharing the support point at ``theta``."""
        n, m = int(self.n[k]), int(self.m[k])
        th = float(theta) % TWO_PI
        step = TWO_PI / n
        if m == 0 or th >= m * step:
            if m > 0 and abs(th - m * step) < 1e-15:
                return m * step - step / 2, m * step
            return th, th
        j = min(max(round(th / step), 0), m)
        lo = j * step - step / 2 if (j > 0 or m == n) else 0.0
        hi = j * step + step / 2 if (j < m or m == n) else j * step
        return lo, hi

    def breakpoints(self, k: int) -> np.ndarray:
        m = int(self.m[k])
        return math.pi * (2 * np.arange(m) + 1) / int(self.n[k])

    def support_table(self, D: int) -> np.ndarray:
        """Support values of all bodies (and the limit) on ``D`` grid angles."""
        if D not in self._tables:
            th = direction_grid(D)
            idx = np.arange(len(self) + 1)[:, None]
            self._tables[D] = np.ascontiguousarray(self.support(idx, th[None, :]))
        return self._tables[D]


def build_rings(n_max: int) -> NestedBodies:
    """Rings through generation ``n_max`` in lexicographic order.

    ``T_0`` is the unit disk (named ``(2, 3)``); generation ``n`` adds the
    rings ``(n, 1), ..., (n, n)`` and the disk ``(n, n+1)`` of radius
    ``R_{n+1}``.
    """
    if not 4 <= n_max <= N_MAX_LIMIT:
        raise RangeError(f"n_max must lie in [4, {N_MAX_LIMIT}]")
    R = generation_radii(n_max)
    ns, ms, rhos, labels = [2], [0], [1.0], [(2, 3)]
    for n in range(3, n_max + 1):
        for m in range(1, n + 2):
            p = RingParams(n, m, R[n])
            ns.append(n)
            ms.append(m if m <= n else 0)
            rhos.append(p.rho)
            labels.append((n, m))
    return NestedBodies(ns, ms, rhos, limit_radius(n_max), labels, R)


def _generation_indices(bodies: NestedBodies, n: int):
    """Indices of the bodies bounding the consecutive pairs of generation ``n``."""
    if not bodies.labels or n < 3 or (n, n + 1) not in bodies._index:
        raise RangeError(f"generation {n} not built")
    start = bodies.index_of(n, 1)
    return start - 1, start + n


def generation_dist_sum(bodies: NestedBodies, n: int, N: int = 2048) -> float:
    """Sum of Hausdorff distances of consecutive bodies in generation ``n``.

    The first term pairs ``(n, 1)`` with the previous generation disk
    ``(n-1, n)``; then ``(n, m)`` with ``(n, m-1)`` for ``m = 2..n+1``.
    """
    from .geometry import hausdorff_dist

    first, last = _generation_indices(bodies, n)
    return math.fsum(hausdorff_dist(bodies.body(k), bodies.body(k + 1), N)
                     for k in range(first, last))


def generation_dist_closed_form(bodies_or_R, n: int) -> float:
    """``sum_{m=1}^{n+1} mu^(m-1) R_n (1 - mu cos(pi/n))``."""
    R = bodies_or_R.R if isinstance(bodies_or_R, NestedBodies) else bodies_or_R
    q = mu(n)
    geo = -math.expm1((n + 1) * math.log1p(-1.0 / n ** 3)) * n ** 3  # (1 - q^(n+1)) / (1 - q)
    return float(R[n]) * (1.0 - q * math.cos(math.pi / n)) * geo


# ------------------------------------------------------------- levels
def _ratio_rows(bodies: NestedBodies, ks, th):
    """Support-gap ratios for indices ``ks`` (column) at angles ``th``."""
    ks = np.asarray(ks)[:, None]
    s0 = bodies.support(ks - 1, th)
    s1 = bodies.support(ks, th)
    s2 = bodies.support(ks + 1, th)
    return s0 - s1, s1 - s2


def _refined_ratio(bodies, k, N, best_angle):
    def neg_ratio(t):
        num, den = _ratio_rows(bodies, [k], np.array([t]))
        return -float(num[0, 0] / den[0, 0])

    w = TWO_PI / N
    res = minimize_scalar(neg_ratio, bounds=(best_angle - w, best_angle + w),
                          method="bounded", options={"xatol": 1e-13})
    return -float(res.fun)


def _torralba_rows(bodies: NestedBodies, ks, N: int):
    th = direction_grid(N)
    out = np.empty(len(ks))
    for start in range(0, len(ks), 256):
        chunk = np.asarray(ks[start:start + 256])
        num, den = _ratio_rows(bodies, chunk, th[None, :])
        if np.any(den < 1e-14):
            bad = int(chunk[np.argmax(np.any(den < 1e-14, axis=1))])
            raise Degenerate(f"bodies {bad} and {bad + 1} are not strictly nested")
        ratio = num / den
        best = np.argmax(ratio, axis=1)
        for i, k in enumerate(chunk):
            k = int(k)
            cand = float(ratio[i, best[i]])
            angle = float(th[best[i]])
            bp = np.concatenate([bodies.breakpoints(k - 1), bodies.breakpoints(k),
                                 bodies.breakpoints(k + 1)])
            if bp.size:
                bn, bd = _ratio_rows(bodies, [k], bp[None, :])
                if np.any(bd < 1e-14):
                    raise Degenerate(f"bodies {k} and {k + 1} are not strictly nested")
                j = int(np.argmax(bn[0] / bd[0]))
                if bn[0, j] / bd[0, j] > cand:
                    cand, angle = float(bn[0, j] / bd[0, j]), float(bp[j])
            out[start + i] = max(cand, _refined_ratio(bodies, k, N, angle))
    return out


def torralba_K(bodies: NestedBodies, k: int, N: int = 2048) -> float:
    """Largest ratio ``(sigma_{k-1} - sigma_k) / (sigma_k - sigma_{k+1})``.

    Evaluated on ``N`` uniform directions plus the edge normals of the
    three bodies, then refined by a bounded scalar search.
    """
    if not 1 <= k <= bodies.last - 1:
        raise RangeError(f"torralba constant needs 1 <= k <= {bodies.last - 1}")
    return float(_torralba_rows(bodies, [k], N)[0])


@dataclass(frozen=True, eq=False)
class PrescribedLevels:
    """Values ``lambda_k`` attached to the bodies ``T_k``.

    Attributes
    ----------
    K : ndarray
        ``K[k]`` for ``k = 1..last-1``; ``K[0]`` and ``K[last]`` are nan.
    log_gap : ndarray
        ``log(lambda_k - lambda_{k+1})`` for ``k = 0..last``; the final
        entry is the geometric tail ``lambda_last - lambda_inf``.
    log_excess : ndarray
        ``log(lambda_k - lambda_inf)`` for ``k = 0..last+1`` (last is -inf).
    lam_inf : float
        The limit value, which is the minimum of the reconstructed function.
    """

    lam0: float
    lam1: float
    K: np.ndarray
    log_gap: np.ndarray
    log_excess: np.ndarray
    lam_inf: float

    @property
    def lam(self) -> np.ndarray:
        """``lambda_k`` as floats (they saturate at ``lam_inf`` for deep ``k``)."""
        return self.lam_inf + np.exp(self.log_excess[:-1])

    @property
    def gaps(self) -> np.ndarray:
        return np.exp(self.log_gap)


def assign_levels(bodies: NestedBodies, lam0: float = 1.0, lam1: float = 0.5,
                  N: int = 2048) -> PrescribedLevels:
    """Apply ``K_k (lambda_k - lambda_{k+1}) = (lambda_{k-1} - lambda_k) / 2``."""
    if not lam0 > lam1 > 0:
        raise ValueError("levels need lam0 > lam1 > 0")
    last = bodies.last
    if last < 2:
        raise RangeError("need at least three bodies")
    K = np.full(last + 1, np.nan)
    K[1:last] = _torralba_rows(bodies, np.arange(1, last), N)
    log_gap = np.empty(last + 1)
    log_gap[0] = math.log(lam0 - lam1)
    log_gap[1:last] = log_gap[0] - np.cumsum(np.log(2.0 * K[1:last]))
    q = 1.0 / (2.0 * K[last - 1])
    log_gap[last] = log_gap[last - 1] + math.log(q / (1.0 - q))
    log_excess = np.empty(last + 2)
    log_excess[-1] = -np.inf
    acc = -np.inf
    for k in range(last, -1, -1):
        acc = np.logaddexp(acc, log_gap[k])
        log_excess[k] = acc
    lam_inf = lam0 - math.exp(log_excess[0])
    return PrescribedLevels(float(lam0), float(lam1), K, log_gap, log_excess, lam_inf)


# ---------------------------------------------------------- evaluation
_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


class CexFunction:
    """Convex function with ``[f <= lambda_k] = T_k``.

    Between consecutive levels the sublevel set is the Minkowski blend of
    ``T_k`` and ``T_{k+1}``; outside ``T_0`` the function is
    ``lambda_0 + dist(x, T_0)``.  The value at ``x`` is the maximum over
    directions ``u`` of the level at which the blended support in
    direction ``u`` reaches ``<x, u>``; equivalently the level coordinate
    ``c(x)`` is the minimum over directions of the per-direction
    coordinate.

    Parameters
    ----------
    bodies : NestedBodies
    levels : PrescribedLevels
    D : int
        Size of the direction grid of the first search stage.
    """

    def __init__(self, bodies: NestedBodies, levels: PrescribedLevels, D: int = 1024):
        self.bodies = bodies
        self.levels = levels
        self.D = D
        self.last = bodies.last
        self.theta = direction_grid(D)
        S = bodies.support_table(D)
        self._S = S
        # columns of -S are increasing; offset them so that one sorted array
        # answers every (point, direction) query with a single searchsorted
        span = S.shape[0]
        self._M = max(1.0, float(S.max()))
        self._offset = 8.0 * self._M
        self._flat = (-S + self._offset * np.arange(D)[None, :]).T.ravel()
        self._span = span
        self._steps = max(1, math.ceil(math.log2(span)))

    # -- per-direction coordinate ------------------------------------
    def _coord_grid(self, X):
        """Coordinate on the grid for points ``X`` of shape (P, 2)."""
        S = self._S
        U = np.stack([np.cos(self.theta), np.sin(self.theta)])
        h = X @ U  # (P, D)
        cols = np.arange(self.D)[None, :]
        q = -np.clip(h, -2 * self._M, 2 * self._M) + self._offset * cols
        cnt = np.searchsorted(self._flat, q.ravel(), side="right").reshape(h.shape)
        cnt -= cols * self._span
        k = np.clip(cnt - 1, 0, self.last)
        sk = S[k, cols]
        sk1 = S[k + 1, cols]
        c = k + 1 - (h - sk1) / (sk - sk1)
        c = np.where(cnt == 0, -(h - S[0, cols]), c)
        c = np.where(cnt >= self._span, self.last + 1.0, c)
        return c

    def coord_along(self, X, th):
        """Per-point coordinate of points ``X`` (P, 2) at angles ``th`` (P,)."""
        bodies = self.bodies
        h = X[:, 0] * np.cos(th) + X[:, 1] * np.sin(th)
        s0 = bodies.support(np.zeros(len(th), dtype=np.int64), th)
        slim = np.full(len(th), bodies.limit)
        lo = np.zeros(len(th), dtype=np.int64)
        hi = np.full(len(th), self.last + 1, dtype=np.int64)
        for _ in range(self._steps):
            mid = (lo + hi) // 2
            ge = bodies.support(mid, th) >= h
            lo = np.where(ge, mid, lo)
            hi = np.where(ge, hi, mid)
        sk = bodies.support(lo, th)
        sk1 = bodies.support(lo + 1, th)
        c = lo + 1 - (h - sk1) / (sk - sk1)
        c = np.where(h > s0, -(h - s0), c)
        return np.where(h <= slim, self.last + 1.0, c)

    def coord(self, X, refine: bool = True):
        """Level coordinate and minimising angle for points ``X`` (P, 2)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cs, ths = [], []
        for start in range(0, len(X), 2048):
            Xc = X[start:start + 2048]
            cg = self._coord_grid(Xc)
            j = np.argmin(cg, axis=1)
            c = cg[np.arange(len(Xc)), j]
            th = self.theta[j]
            if refine:
                cr, tr = self._golden(Xc, th, TWO_PI / self.D)
                better = cr < c
                c = np.where(better, cr, c)
                th = np.where(better, tr, th)
            cs.append(c)
            ths.append(th)
        return np.concatenate(cs), np.mod(np.concatenate(ths), TWO_PI)

    def _golden(self, X, th0, width, iters=40):
        a, b = th0 - width, th0 + width
        c = b - _GOLD * (b - a)
        d = a + _GOLD * (b - a)
        fc, fd = self.coord_along(X, c), self.coord_along(X, d)
        for _ in range(iters):
            left = fc < fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            nd = np.where(left, c, a + _GOLD * (b - a))
            nc = np.where(left, b - _GOLD * (b - a), d)
            new = np.where(left, nc, nd)
            fnew = self.coord_along(X, new)
            fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
            c, d = nc, nd
        pick = fc < fd
        return np.where(pick, fc, fd), np.where(pick, c, d)

    # -- values ---------------------------------------------------------
    def log_excess_from_coord(self, c):
        """``log(f - lambda_inf)`` as a function of the level coordinate."""
        lv = self.levels
        c = np.asarray(c, dtype=float)
        out = np.full(c.shape, -np.inf)
        outside = c < 0
        out[outside] = np.log(math.exp(lv.log_excess[0]) - c[outside])
        band = (c >= 0) & (c < self.last + 1)
        k = np.floor(c[band]).astype(np.int64)
        s = k + 1 - c[band]
        with np.errstate(divide="ignore"):
            out[band] = np.logaddexp(lv.log_excess[k + 1], np.log(s) + lv.log_gap[k])
        return out

    def coord_of_log_excess(self, le: float) -> float:
        """Inverse of :meth:`log_excess_from_coord` for a scalar."""
        lv = self.levels
        if le == -np.inf:
            return float(self.last + 1)
        if le >= lv.log_excess[0]:
            return -(math.exp(le) - math.exp(lv.log_excess[0]))
        k = int(np.searchsorted(-lv.log_excess, -le, side="right")) - 1
        k = min(max(k, 0), self.last)
        s = math.exp(le - lv.log_gap[k]) - math.exp(lv.log_excess[k + 1] - lv.log_gap[k])
        return k + 1 - min(max(s, 0.0), 1.0)

    def log_excess(self, X):
        X = np.asarray(X, dtype=float)
        c, _ = self.coord(X.reshape(-1, 2))
        return self.log_excess_from_coord(c).reshape(X.shape[:-1])

    def value(self, X):
        X = np.asarray(X, dtype=float)
        return self.levels.lam_inf + np.exp(self.log_excess(X))

    def rank(self, X):
        X = np.asarray(X, dtype=float)
        c, _ = self.coord(X.reshape(-1, 2))
        return (-c).reshape(X.shape[:-1])

    # -- gradients ----------------------------------------------------------
    def log_grad_norm_from(self, c, th):
        """Logarithm of the gradient norm in the band of ``c`` at angle ``th``."""
        c = np.asarray(c, dtype=float)
        th = np.asarray(th, dtype=float)
        out = np.full(c.shape, -np.inf)
        out[c < 0] = 0.0
        band = (c >= 0) & (c < self.last + 1)
        k = np.floor(c[band]).astype(np.int64)
        t = th[band]
        dsig = self.bodies.support(k, t) - self.bodies.support(k + 1, t)
        out[band] = self.levels.log_gap[k] - np.log(dsig)
        return out

    def grad(self, X):
        """Gradient ``n(theta*) gap_k / (sigma_k - sigma_{k+1})(theta*)``.

        Batch evaluation without the corner correction of :meth:`grad_point`.
        """
        X = np.asarray(X, dtype=float)
        flat = X.reshape(-1, 2)
        if flat.shape[0] == 1 and X.ndim == 1:
            return self.grad_point(flat[0])
        c, th = self.coord(flat)
        mag = np.exp(self.log_grad_norm_from(c, th))
        g = mag[:, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)
        return g.reshape(X.shape)

    def grad_point(self, x):
        """Minimal-norm subgradient at one point.

        Off corners this is the band gradient.  On a corner of the blended
        sublevel boundary (both bounding bodies have a vertex there) the
        subdifferential is a segment on the line ``<w, z> = gap`` with
        ``w`` the difference of the two vertices, and its minimal-norm
        element is returned.
        """
        x = np.asarray(x, dtype=float)
        c, th = self.coord(x[None, :])
        c, th = float(c[0]), float(th[0])
        if c >= self.last + 1:
            return np.zeros(2)
        n_th = np.array([math.cos(th), math.sin(th)])
        if c < 0:
            return n_th
        k = int(math.floor(c))
        gap = math.exp(self.levels.log_gap[k])
        lo0, hi0 = self.bodies.normal_cone(k, th)
        lo1, hi1 = self.bodies.normal_cone(k + 1, th)
        lo, hi = max(lo0, lo1), min(hi0, hi1)
        if hi - lo > 1e-12:
            probe = self.coord_along(np.array([x, x]), np.array([lo + 1e-13, hi - 1e-13]))
            if np.all(np.abs(probe - c) <= 1e-11 * max(1.0, abs(c))):
                p0 = self.bodies.support_point(k, lo + 0.5 * (hi - lo))
                p1 = self.bodies.support_point(k + 1, lo + 0.5 * (hi - lo))
                w = p0 - p1
                ang = math.atan2(w[1], w[0]) % TWO_PI
                rel = (ang - lo) % TWO_PI
                if rel <= hi - lo:
                    return gap * w / float(w @ w)
                ends = [np.array([math.cos(a), math.sin(a)]) for a in (lo, hi)]
                e = max(ends, key=lambda u: float(w @ u))
                return gap * e / float(w @ e)
        dsig = float(self.bodies.support(k, th) - self.bodies.support(k + 1, th))
        return gap / dsig * n_th

    # -- proximal step --------------------------------------------------
    def _sublevel_support(self, c, th):
        """Support of ``[f <= level(c)]`` at angles ``th``."""
        if c < 0:
            return self.bodies.support(0, th) - c
        if c >= self.last + 1:
            return np.full(np.shape(th), self.bodies.limit)
        k = int(math.floor(c))
        w = k + 1 - c
        return w * self.bodies.support(k, th) + (1 - w) * self.bodies.support(k + 1, th)

    def _grad_scale(self, c, th):
        if c < 0:
            return 1.0
        if c >= self.last + 1:
            return 0.0
        k = int(math.floor(c))
        dsig = float(self.bodies.support(k, th) - self.bodies.support(k + 1, th))
        return math.exp(self.levels.log_gap[k]) / dsig

    def _proj_gap(self, x, c, refine=True):
        """``(dist(x, S_c), maximising angle)`` for the sublevel body ``S_c``."""
        th = self.theta
        v = x[0] * np.cos(th) + x[1] * np.sin(th) - self._sublevel_support(c, th)
        j = int(np.argmax(v))
        best, arg = float(v[j]), float(th[j])
        if refine:
            w = TWO_PI / self.D

            def neg(t):
                return -(x[0] * math.cos(t) + x[1] * math.sin(t)
                         - float(self._sublevel_support(c, np.array([t]))[0]))

            res = minimize_scalar(neg, bounds=(arg - w, arg + w), method="bounded",
                                  options={"xatol": 1e-14})
            if -res.fun > best:
                best, arg = float(-res.fun), float(res.x)
            # the value is flat at the optimum; the derivative
            # <x - sp(t), u'(t)> pins the angle to full precision
            def slope(t):
                d = x - self._sublevel_support_point(c, t)
                return -d[0] * math.sin(t) + d[1] * math.cos(t)

            a, b = arg - w, arg + w
            if slope(a) > 0 > slope(b):
                t = brentq(slope, a, b, xtol=1e-16, rtol=1e-15)
                val = -neg(t)
                if val >= best - 1e-15:
                    best, arg = val, t
        return best, arg

    def _sublevel_support_point(self, c, t):
        if c < 0:
            return self.bodies.support_point(0, t) + (-c) * np.array([math.cos(t), math.sin(t)])
        if c >= self.last + 1:
            return self.bodies.limit * np.array([math.cos(t), math.sin(t)])
        k = int(math.floor(c))
        w = k + 1 - c
        return w * self.bodies.support_point(k, t) + (1 - w) * self.bodies.support_point(k + 1, t)

    def prox(self, x, h: float):
        """Exact proximal point ``argmin f(y) + |y - x|^2 / (2h)``.

        The minimiser is the projection of ``x`` onto the sublevel body
        ``S_c`` whose distance to ``x`` equals ``h`` times the gradient
        scale at the projection; ``c`` is found by a bracketing root
        search (the residual is increasing in ``c``).
        """
        x = np.asarray(x, dtype=float)
        c0 = float(self.coord(x[None, :])[0][0])
        top = float(self.last + 1)
        if c0 >= top or h <= 0:
            return x.copy()
        if c0 < 0:
            # outside T_0 the function is lambda_0 + dist(x, T_0)
            d0, th0 = self._proj_gap(x, 0.0)
            if d0 >= h:
                return x - h * np.array([math.cos(th0), math.sin(th0)])

        def F(c):
            d, th = self._proj_gap(x, c)
            return max(d, 0.0) - h * self._grad_scale(c, th)

        if F(c0) >= 0:
            return x.copy()
        if F(top) <= 0:
            c_star = top
        else:
            c_star = brentq(F, c0, top, xtol=1e-13, rtol=1e-15, maxiter=200)

        def candidate(c):
            d, th = self._proj_gap(x, c)
            d = max(d, 0.0)
            le = float(self.log_excess_from_coord(np.array([c]))[0])
            return math.exp(le) + d * d / (2 * h), d, th

        # F jumps at integer levels, where the minimiser often sits on a kink
        best = candidate(c_star)
        r = float(round(c_star))
        if abs(c_star - r) < 1e-6 and c0 <= r <= top:
            alt = candidate(r)
            if alt[0] < best[0]:
                best = alt
        _, d, th = best
        if d <= 0:
            return x.copy()
        return x - d * np.array([math.cos(th), math.sin(th)])


@lru_cache(maxsize=16)
def _cached_function(bodies, levels):
    return CexFunction(bodies, levels)


def eval_cex(levels: PrescribedLevels, bodies: NestedBodies, x) -> float:
    """Value of the reconstructed convex function at one point."""
    f = _cached_function(bodies, levels)
    return float(f.value(np.asarray(x, dtype=float)))


def grad_cex(levels: PrescribedLevels, bodies: NestedBodies, x) -> np.ndarray:
    """Minimal-norm subgradient of the reconstructed function at ``x``."""
    f = _cached_function(bodies, levels)
    x = np.asarray(x, dtype=float)
    if float(f.coord(x[None, :])[0][0]) >= bodies.last + 1:
        raise UndefinedAtMin("gradient requested on the minimising disk")
    return f.grad_point(x)


def kl_failure_witness(levels, bodies: NestedBodies, K: int, N: int = 2048) -> dict:
    """Partial sums of consecutive Hausdorff distances ``sum_{k<K} Dist(T_k, T_{k+1})``.

    Returns a dict with per-body partial sums and a per-generation table:
    generation sum, its closed form, the ratio to ``pi^2 r / (2n)``, the
    cumulative sum and the harmonic comparison ``(pi^2 r/2)(H_n - H_2)``.
    ``levels`` is optional; when given, the remaining value budget
    ``lambda_0 - lambda_K`` is reported next to each partial sum.
    """
    from .geometry import hausdorff_dist

    if not 1 <= K <= bodies.last:
        raise RangeError(f"K must lie in 1..{bodies.last}")
    dists = np.array([hausdorff_dist(bodies.body(k), bodies.body(k + 1), N) for k in range(K)])
    partial = np.cumsum(dists)
    out = {"K": K, "limit_radius": bodies.limit, "dist": dists.tolist(),
           "partial_sums": partial.tolist()}
    if levels is not None:
        out["value_budget"] = (levels.lam0 - levels.lam[1:K + 1]).tolist()
    gens = []
    if bodies.labels:
        r = bodies.limit
        cum = 0.0
        for n in bodies.generations():
            first, last = _generation_indices(bodies, n)
            if last > K:
                break
            g = math.fsum(dists[first:last])
            cum += g
            H = math.fsum(1.0 / j for j in range(3, n + 1))
            gens.append({
                "n": n,
                "bodies": last + 1,
                "gen_sum": g,
                "closed_form": generation_dist_closed_form(bodies, n),
                "ratio_asymptotic": g / (math.pi ** 2 * r / (2 * n)),
                "cumulative": cum,
                "harmonic_model": math.pi ** 2 * r / 2 * H,
            })
    out["generations"] = gens
    return out


@lru_cache(maxsize=8)
def _cex_parts(n_max: int, lam0: float, lam1: float):
    bodies = build_rings(n_max)
    levels = assign_levels(bodies, lam0, lam1)
    return bodies, levels


def cex_field(n_max: int = 12, lam0: float = 1.0, lam1: float = 0.5):
    """The reconstructed function as a :class:`~kllab.zoo.ScalarField`."""
    from .zoo import ScalarField

    bodies, levels = _cex_parts(n_max, lam0, lam1)
    f = _cached_function(bodies, levels)

    def rank_of_log_level(le):
        return -f.coord_of_log_excess(le)

    def log_slope(X):
        X = np.asarray(X, dtype=float)
        c, th = f.coord(X.reshape(-1, 2))
        return f.log_grad_norm_from(c, th).reshape(X.shape[:-1])

    def value(X):
        return f.value(X)

    field = ScalarField(
        name=f"cex:{n_max}",
        value=value,
        grad=f.grad,
        convex=True,
        smooth=False,
        min_value=levels.lam_inf,
        argmin=f"disk of radius {bodies.limit!r}",
        prox_solver=lambda x, h: f.prox(x, h),
        log_excess_fn=f.log_excess,
        rank_fn=f.rank,
        rank_of_log_level=rank_of_log_level,
        log_slope_fn=log_slope,
        formulas={"f": "convex function with [f <= lambda_k] = T_k"},
    )
    object.__setattr__(field, "cex", f)
    return field
