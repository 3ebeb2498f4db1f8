"""Level profiles, desingularising functions and finite-sample checks.

Levels are always excess values ``r = f - min f``.  Internally levels are
carried as ``log r`` so that the counterexample, whose level gaps shrink
faster than any power, can be probed far below the floating point range
of ``r`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.spatial import HalfspaceIntersection
from scipy.spatial.distance import directed_hausdorff

from .errors import (CriticalValue, Divergent, DivergentTail, EmptyValley,
                     NotStarShaped)
from .geometry import TWO_PI, ConvexBody, PointHull, direction_grid, hausdorff_dist, max_violation
from .reports import FAIL, PASS, CheckReport, verdict_from_margin

__all__ = [
    "LevelProfile",
    "Desingularizer",
    "trace_level",
    "sample_band",
    "slope_profile",
    "build_phi",
    "check_kl",
    "check_sublevel_lipschitz",
    "check_error_bound",
    "compose",
    "extract_talweg",
    "growth_phi",
    "integrability_test",
    "IntegrabilityResult",
    "sublevel_body",
    "tangent_body",
    "TracedBody",
    "profile_from_u",
]

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


# ------------------------------------------------------------ level tracing
def _radial_solve(field, theta, target, max_iter: int = 200, gtol: float = 1e-12,
                  guess=None):
    """Radii where ``field.rank`` along rays from the anchor hits ``target``.

    Vectorised Anderson-Bjorck regula falsi inside a bracket.  With a
    ``guess`` (radii per ray) the bracket starts at ``guess * (1 -+ 2e-2)``
    on rays where that encloses the root.  A
    bisection step is taken instead when the bracket end is still at the
    anchor (rank ``-inf`` there for log ranks) or after three steps that
    did not halve the bracket.  A ray is done when the rank residual is
    below ``gtol`` or the bracket is at machine precision.
    """
    theta = np.asarray(theta, dtype=float)
    target = np.broadcast_to(np.asarray(target, dtype=float), theta.shape).copy()
    a = np.asarray(field.anchor, dtype=float)
    E = np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def g(t, idx):
        return field.rank(a + t[:, None] * E[idx]) - target[idx]

    r0 = float(field.rank(a[None, :])[0])
    if np.any(target <= r0):
        raise NotStarShaped("requested level lies at or below the anchor value")
    P = len(theta)
    idx_all = np.arange(P)
    lo = np.zeros(P)
    glo = np.full(P, r0) - target
    hi = np.ones(P)
    if guess is not None:
        # warm start: keep the narrow bracket where it encloses the root
        gs = np.broadcast_to(np.asarray(guess, dtype=float), theta.shape)
        gl, gh = g(gs * 0.98, idx_all), g(gs * 1.02, idx_all)
        hold = (gl < 0) & (gh > 0)
        lo[hold], glo[hold] = gs[hold] * 0.98, gl[hold]
        hi[hold] = gs[hold] * 1.02
    ghi = g(hi, idx_all)
    for _ in range(80):
        need = ghi <= 0
        if not np.any(need):
            break
        lo[need], glo[need] = hi[need], ghi[need]
        hi[need] *= 2.0
        ghi[need] = g(hi[need], idx_all[need])
    if np.any(ghi <= 0) or np.any(~np.isfinite(ghi)):
        raise NotStarShaped("radial bracket not found")
    side = np.zeros(P, dtype=np.int8)
    slow = np.zeros(P, dtype=np.int8)
    active = np.ones(P, dtype=bool)
    for _ in range(max_iter):
        act = np.nonzero(active)[0]
        if act.size == 0:
            break
        l, h, gl, gh = lo[act], hi[act], glo[act], ghi[act]
        with np.errstate(invalid="ignore", divide="ignore"):
            cand = (l * gh - h * gl) / (gh - gl)
        ok = np.isfinite(gl) & (cand > l) & (cand < h) & (slow[act] < 3)
        t = np.where(ok, cand, 0.5 * (l + h))
        gt = g(t, act)
        left = gt < 0
        # Anderson-Bjorck: shrink the retained end value after two same-side moves
        s_old = side[act]
        with np.errstate(invalid="ignore", divide="ignore"):
            m_hi = 1.0 - gt / gl
            m_lo = 1.0 - gt / gh
        m_hi = np.where(np.isfinite(m_hi) & (m_hi > 0), m_hi, 0.5)
        m_lo = np.where(np.isfinite(m_lo) & (m_lo > 0), m_lo, 0.5)
        glo[act] = np.where(left, gt, np.where(s_old == -1, m_lo * gl, gl))
        ghi[act] = np.where(left, np.where(s_old == 1, m_hi * gh, gh), gt)
        lo[act] = np.where(left, t, l)
        hi[act] = np.where(left, h, t)
        side[act] = np.where(left, 1, -1)
        # bisect after three steps in a row that did not halve the bracket
        shrunk = (hi[act] - lo[act]) <= 0.5 * (h - l)
        slow[act] = np.where(shrunk | ~ok, 0, slow[act] + 1)
        hit = np.abs(gt) <= gtol
        lo[act[hit]] = t[hit]
        hi[act[hit]] = t[hit]
        done = hit | (hi[act] - lo[act] <= 4e-16 * hi[act])
        active[act[done]] = False
    return 0.5 * (lo + hi), a[None, :] + (0.5 * (lo + hi))[:, None] * E


def trace_level(field, r=None, N: int = 2048, log_r: Optional[float] = None, theta=None):
    """Points of the level ``[f = min f + r]`` on ``N`` rays from the anchor.

    Parameters
    ----------
    field : ScalarField
    r : float
        Excess level, ``r > 0``.
    log_r : float, optional
        ``log r``, for levels below the floating point range.
    theta : array_like, optional
        Ray angles; defaults to the uniform grid of size ``N``.

    Returns
    -------
    ndarray of shape (N, 2)

    Raises
    ------
    NotStarShaped
        When some ray has no sign change of ``f - r``.
    """
    if log_r is None:
        if r is None or r <= 0:
            raise ValueError("level must be above the minimum")
        log_r = math.log(r)
    th = direction_grid(N) if theta is None else np.asarray(theta, dtype=float)
    target = field.log_level_rank(float(log_r))
    return _radial_solve(field, th, target)[1]


def sample_band(field, lo: float, hi: float, n: int, seed: int = 0, log_uniform: bool = True):
    """Random points with excess value in ``[lo, hi]``.

    Levels are drawn log-uniformly (or uniformly) and angles uniformly;
    each point is located by radial root finding.  Returns ``(X, log_r)``.
    """
    rng = np.random.default_rng(seed)
    if log_uniform:
        lr = rng.uniform(math.log(lo), math.log(hi), n)
    else:
        lr = np.log(rng.uniform(lo, hi, n))
    th = rng.uniform(0.0, TWO_PI, n)
    target = np.array([field.log_level_rank(float(v)) for v in lr])
    _, X = _radial_solve(field, th, target)
    return X, lr


# ------------------------------------------------------------- profiles
@dataclass(frozen=True, eq=False)
class Desingularizer:
    """Piecewise integral of a slope majorant plus a tail model.

    Between grid levels the majorant is interpolated within the family of
    the tail model and integrated exactly: ``log ubar`` linear in ``log r``
    (``interp="power"``) or ``log(r ubar)`` linear in ``log(-log r)``
    (``interp="log-power"``, levels below 1).  Below the smallest level
    the tail model is integrated in closed form.  Above the largest level
    ``ubar`` is held constant.
    """

    log_r: np.ndarray      # increasing
    log_ubar: np.ndarray
    phi_nodes: np.ndarray  # phi at the nodes
    tail: str
    tail_coef: float = float("nan")
    interp: str = "power"

    def _piece(self, i, le):
        """``int_{r_i}^{exp(le)} ubar`` for ``r_i <= exp(le) <= r_{i+1}``."""
        lr, lu = self.log_r, self.log_ubar
        if self.interp == "log-power":
            w0, w1 = lu[i] + lr[i], lu[i + 1] + lr[i + 1]
            L0, L1 = -lr[i], -lr[i + 1]
            c = (w1 - w0) / math.log(L1 / L0)
            ly = math.log(-le / L0)
            return math.exp(w0) * L0 * (-ly) * _expm1_over((c + 1.0) * ly)
        d = lr[i + 1] - lr[i]
        b = (lu[i + 1] - lu[i]) / d if d > 0 else 0.0
        delta = le - lr[i]
        return math.exp(lu[i] + lr[i]) * delta * _expm1_over((b + 1.0) * delta)

    def _tail(self, le):
        lr0, lu0 = self.log_r[0], self.log_ubar[0]
        if self.tail == "none":
            return math.nan if le < lr0 else 0.0
        if self.tail == "power":
            b = self.tail_coef
            return math.exp(lu0 + lr0 + (b + 1.0) * (le - lr0)) / (b + 1.0)
        c = self.tail_coef
        L0, L = -lr0, -le
        return math.exp(lu0 + lr0) * L0 * (L / L0) ** (c + 1.0) / (-(c + 1.0))

    def at_log(self, le):
        """``phi(exp(le))``; vectorised over ``le``."""
        le_arr = np.atleast_1d(np.asarray(le, dtype=float))
        out = np.empty(le_arr.shape)
        lr = self.log_r
        for j, v in enumerate(le_arr.flat):
            if v == -math.inf:
                out.flat[j] = 0.0 if self.tail != "none" else math.nan
            elif v <= lr[0]:
                if self.tail == "none":
                    out.flat[j] = self.phi_nodes[0] if v == lr[0] else math.nan
                else:
                    out.flat[j] = self._tail(v)
            elif v >= lr[-1]:
                out.flat[j] = self.phi_nodes[-1] + math.exp(self.log_ubar[-1]) * (math.exp(v) - math.exp(lr[-1]))
            else:
                i = int(np.searchsorted(lr, v, side="right")) - 1
                out.flat[j] = self.phi_nodes[i] + self._piece(i, v)
        return out.reshape(np.shape(le)) if np.ndim(le) else float(out[0])

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return self.at_log(np.log(r))

    def log_derivative_at_log(self, le):
        """``log phi'(exp(le))``."""
        le = np.asarray(le, dtype=float)
        lr, lu = self.log_r, self.log_ubar
        if self.interp == "log-power":
            with np.errstate(invalid="ignore", divide="ignore"):
                x = np.log(-np.minimum(le, lr[-1]))
            w = np.interp(x, np.log(-lr[::-1]), (lu + lr)[::-1])
            out = np.where(le >= lr[-1], lu[-1], w - le)
        else:
            out = np.interp(le, lr, lu)
        below = le < lr[0]
        if self.tail == "power":
            out = np.where(below, lu[0] + self.tail_coef * (le - lr[0]), out)
        elif self.tail == "log-power":
            with np.errstate(invalid="ignore", divide="ignore"):
                lp = lu[0] + lr[0] - le + self.tail_coef * (np.log(-le) - math.log(-lr[0]))
            out = np.where(below, lp, out)
        else:
            out = np.where(below, np.nan, out)
        return out

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        return np.exp(self.log_derivative_at_log(np.log(r)))


def _expm1_over(z):
    """``expm1(z) / z`` with the removable singularity at 0."""
    if abs(z) < 1e-12:
        return 1.0 + 0.5 * z
    if z > 700:
        return math.exp(z - math.log(z))
    return math.expm1(z) / z


@dataclass(frozen=True, eq=False)
class LevelProfile:
    """Slope data on a decreasing grid of excess levels.

    ``log_r`` is decreasing.  ``s`` is the minimal slope on each level,
    ``u = 1/s``, ``ubar`` the running maximum of ``u`` from the top
    level down and ``phi`` the integral of ``ubar`` from 0 (nan until
    :func:`build_phi` has run).
    """

    log_r: np.ndarray
    log_s: np.ndarray
    points: np.ndarray = dc_field(default=None)
    log_ubar: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    model: Optional[Desingularizer] = None
    field_name: str = ""

    @property
    def r(self):
        return np.exp(self.log_r)

    @property
    def s(self):
        return np.exp(self.log_s)

    @property
    def u(self):
        with np.errstate(over="ignore"):
            return np.exp(-self.log_s)

    @property
    def ubar(self):
        lu = np.maximum.accumulate(-self.log_s) if self.log_ubar is None else self.log_ubar
        with np.errstate(over="ignore"):
            return np.exp(lu)

    def rows(self):
        phi = self.phi if self.phi is not None else np.full(len(self.log_r), np.nan)
        return list(zip(self.r, self.s, self.u, self.ubar, phi))


def _grid_from(r, log_r):
    if log_r is None:
        r = np.asarray(r, dtype=float)
        if np.any(r <= 0):
            raise ValueError("levels must lie above the minimum")
        log_r = np.log(r)
    log_r = np.asarray(log_r, dtype=float)
    if np.any(np.diff(log_r) >= 0):
        raise ValueError("level grid must be strictly decreasing")
    return log_r


def slope_profile(field, r=None, N: int = 2048, log_r=None, refine: bool = True,
                  critical: float = 1e-12) -> LevelProfile:
    """Minimal slope on each level of a decreasing grid.

    The level curve is traced on ``N`` rays; the slope minimum over the
    samples is refined by a golden-section search over the ray angle in
    the two neighbouring grid cells.

    Raises
    ------
    CriticalValue
        When some minimal slope is below ``critical``.
    """
    log_r = _grid_from(r, log_r)
    J = len(log_r)
    th = direction_grid(N)
    targets = np.array([field.log_level_rank(float(v)) for v in log_r])
    TH = np.tile(th, J)
    _, X = _radial_solve(field, TH, np.repeat(targets, N))
    ls = field.log_slope(X).reshape(J, N)
    j = np.argmin(ls, axis=1)
    log_s = ls[np.arange(J), j]
    pts = X.reshape(J, N, 2)[np.arange(J), j]
    if refine:
        w = TWO_PI / N
        a, b = th[j] - w, th[j] + w

        def obj(t):
            _, P = _radial_solve(field, t, targets)
            return field.log_slope(P), P

        c = b - _GOLD * (b - a)
        d = a + _GOLD * (b - a)
        fc, _ = obj(c)
        fd, _ = obj(d)
        for _ in range(30):
            left = fc < fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            nc = np.where(left, b - _GOLD * (b - a), d)
            nd = np.where(left, c, a + _GOLD * (b - a))
            new = np.where(left, nc, nd)
            fnew, _ = obj(new)
            fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
            c, d = nc, nd
        tbest = np.where(fc < fd, c, d)
        fbest, pbest = obj(tbest)
        better = fbest < log_s
        log_s = np.where(better, fbest, log_s)
        pts = np.where(better[:, None], pbest, pts)
    bad = np.nonzero(log_s < math.log(critical))[0]
    if bad.size:
        i = int(bad[0])
        raise CriticalValue(f"minimal slope {math.exp(log_s[i]):.3e} below {critical:g} "
                            f"at level r={math.exp(log_r[i]):.6e}", index=i)
    return LevelProfile(log_r, log_s, pts, field_name=getattr(field, "name", ""))


def profile_from_u(r, u) -> LevelProfile:
    """Profile from a tabulated ``u`` on a decreasing grid."""
    r = np.asarray(r, dtype=float)
    return LevelProfile(_grid_from(r, None), -np.log(np.asarray(u, dtype=float)))


def _fit_tail(lr, lu, model):
    """Least-squares fit on the tail nodes; returns ``(coef, residual)``."""
    if model == "power":
        A = np.column_stack([np.ones_like(lr), lr])
        y = lu
    else:
        A = np.column_stack([np.ones_like(lr), np.log(-lr)])
        y = lu + lr
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[1]), res


def build_phi(profile: LevelProfile, tail: str = "auto", tail_points: int = 8) -> LevelProfile:
    """Integrate the running-max majorant of ``u`` into a desingulariser.

    Parameters
    ----------
    tail : {"auto", "power", "log-power", "none"}
        Model of ``ubar`` below the smallest grid level.  ``power`` fits
        ``log u = a + b log r`` (integrable iff ``b > -1``); ``log-power``
        fits ``log(u r) = a + c log(-log r)`` (integrable iff ``c < -1``,
        needs ``r < 1``).  ``auto`` takes the smaller residual.  ``none``
        reports ``phi`` relative to the smallest level.

    Raises
    ------
    DivergentTail
        When the selected tail is not integrable; ``.profile`` then
        carries ``phi`` relative to the smallest grid level.
    """
    lr_desc = profile.log_r
    lu_desc = np.maximum.accumulate(-profile.log_s)
    lr, lu = lr_desc[::-1], lu_desc[::-1]
    # nodes increasing in r; cumulative integral from the smallest level
    J = len(lr)
    k = min(tail_points, J)
    tl, tu = lr[:k], lu[:k]
    choice, coef = tail, float("nan")
    if tail == "auto":
        fits = {"power": _fit_tail(tl, tu, "power")}
        if np.all(lr < 0):
            fits["log-power"] = _fit_tail(tl, tu, "log-power")
        choice = min(fits, key=lambda m: fits[m][1])
        coef = fits[choice][0]
    elif tail in ("power", "log-power"):
        coef = _fit_tail(tl, tu, tail)[0]
    elif tail != "none":
        raise ValueError(f"unknown tail model {tail!r}")
    interp = "log-power" if choice == "log-power" else "power"
    rel = np.zeros(J)
    tmp = Desingularizer(lr, lu, rel, "none", interp=interp)
    for i in range(J - 1):
        rel[i + 1] = rel[i] + tmp._piece(i, lr[i + 1])
    divergent = (choice == "power" and coef <= -1.0) or (choice == "log-power" and coef >= -1.0)
    if choice == "none" or divergent:
        model = Desingularizer(lr, lu, rel, "none", coef, interp)
        out = replace(profile, log_ubar=lu_desc, phi=rel[::-1], model=model)
        if divergent:
            raise DivergentTail(f"{choice} tail with exponent {coef:.4g} is not integrable",
                                profile=out)
        return out
    base = Desingularizer(lr, lu, rel, choice, coef, interp)
    t0 = base._tail(lr[0])
    model = Desingularizer(lr, lu, rel + t0, choice, coef, interp)
    return replace(profile, log_ubar=lu_desc, phi=(rel + t0)[::-1], model=model)


# ------------------------------------------------------------------ checks
def _log_dphi(phi, le):
    """``log phi'`` at log-levels for the accepted representations of phi."""
    if isinstance(phi, LevelProfile):
        phi = phi.model
    if isinstance(phi, Desingularizer):
        return phi.log_derivative_at_log(le)
    if isinstance(phi, tuple):
        return np.log(phi[1](np.exp(le)))
    raise TypeError("phi must be a LevelProfile, a Desingularizer or a (phi, dphi) pair")


def _phi_at_log(phi, le):
    if isinstance(phi, LevelProfile):
        phi = phi.model
    if isinstance(phi, Desingularizer):
        return phi.at_log(le)
    if isinstance(phi, tuple):
        return phi[0](np.exp(le))
    return phi(np.exp(le))


def check_kl(field, phi, band=(1e-6, 1.0), n: int = 10_000, seed: int = 0,
             tol: float = 1e-3, X=None) -> CheckReport:
    """Sampled test of ``phi'(f(x) - min f) |grad f(x)| >= 1`` on a value band.

    ``phi`` is a built profile, a :class:`Desingularizer` or a pair of
    callables ``(phi, dphi)``.  The report's ``extra`` holds the largest
    deviation ``|phi' |grad f| - 1|``.
    """
    if X is None:
        X, le = sample_band(field, band[0], band[1], n, seed)
    else:
        X = np.asarray(X, dtype=float)
        le = field.log_excess(X)
    prod = np.exp(_log_dphi(phi, le) + field.log_slope(X))
    margins = prod - 1.0
    return verdict_from_margin("kl", margins, tol, points=X, levels=np.exp(le),
                               extra={"max_abs_dev": float(np.max(np.abs(margins))),
                                      "min_product": float(np.min(prod))})


class _SublevelBody(ConvexBody):
    """Exact sublevel body of the reconstructed counterexample."""

    kind = "sublevel"

    def __init__(self, fun, c):
        self.fun, self.c = fun, float(c)

    def support(self, theta):
        th = np.asarray(theta, dtype=float)
        val = self.fun._sublevel_support(self.c, np.atleast_1d(th))
        return float(val[0]) if np.ndim(theta) == 0 else val.reshape(th.shape)

    def breakpoints(self):
        c, b = self.c, self.fun.bodies
        if c < 0 or c >= b.last + 1:
            return b.breakpoints(0) if c < 0 else np.empty(0)
        k = int(math.floor(c))
        return np.concatenate([b.breakpoints(k), b.breakpoints(k + 1)])


class TracedBody(ConvexBody):
    """Sublevel set known through its traced boundary.

    The support value in a direction is the grid maximum of the traced
    points, refined by a golden-section search over the ray angle in the
    two neighbouring cells, so it is exact up to root-finding accuracy
    when the sublevel set is convex.
    """

    kind = "traced"

    def __init__(self, field, log_r: float, N: int = 2048):
        self.field, self.log_r, self.N = field, float(log_r), N
        self.theta = direction_grid(N)
        self.target = field.log_level_rank(self.log_r)
        self.points = _radial_solve(field, self.theta, self.target)[1]

    def support(self, theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float)).ravel()
        U = np.stack([np.cos(th), np.sin(th)], axis=-1)
        H = U @ self.points.T
        j = np.argmax(H, axis=1)
        best = H[np.arange(len(th)), j]
        w = TWO_PI / self.N

        guess = np.linalg.norm(self.points - self.field.anchor, axis=1)[j]

        def obj(t):
            P = _radial_solve(self.field, t, self.target, guess=guess)[1]
            return np.sum(P * U, axis=1)

        a, b = self.theta[j] - w, self.theta[j] + w
        c = b - _GOLD * (b - a)
        d = a + _GOLD * (b - a)
        fc, fd = obj(c), obj(d)
        for _ in range(30):
            left = fc > fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            nc = np.where(left, b - _GOLD * (b - a), d)
            nd = np.where(left, c, a + _GOLD * (b - a))
            fnew = obj(np.where(left, nc, nd))
            fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
            c, d = nc, nd
        val = np.maximum(best, np.maximum(fc, fd))
        return float(val[0]) if np.ndim(theta) == 0 else val.reshape(np.shape(theta))

    def distance(self, X):
        """Distance from points to the sublevel set (0 inside)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        D = np.linalg.norm(X[:, None, :] - self.points[None, :, :], axis=-1)
        j = np.argmin(D, axis=1)
        best = D[np.arange(len(X)), j]
        w = TWO_PI / self.N
        tg = np.full(len(X), self.target)

        def obj(t):
            return np.linalg.norm(X - _radial_solve(self.field, t, tg)[1], axis=1)

        a, b = self.theta[j] - w, self.theta[j] + w
        c = b - _GOLD * (b - a)
        d = a + _GOLD * (b - a)
        fc, fd = obj(c), obj(d)
        for _ in range(40):
            left = fc < fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            nc = np.where(left, b - _GOLD * (b - a), d)
            nd = np.where(left, c, a + _GOLD * (b - a))
            fnew = obj(np.where(left, nc, nd))
            fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
            c, d = nc, nd
        inside = self.field.rank(X) <= self.target
        return np.where(inside, 0.0, np.minimum(best, np.minimum(fc, fd)))


def tangent_body(field, log_r: float, N: int = 512) -> PointHull:
    """Circumscribed reconstruction of a convex sublevel set.

    The level curve is traced on ``N`` rays and the body is the
    intersection of the supporting half-planes ``<x - p, n> <= 0`` with
    ``n`` the gradient direction at each traced point ``p``.  Polygon
    vertices are recovered exactly; smooth arcs with an error of order
    ``(2 pi / N)^2``.
    """
    P = trace_level(field, log_r=log_r, N=N)
    G = np.asarray(field.grad(P), dtype=float)
    big = np.max(np.abs(G), axis=1)
    G = G / np.where(big > 0, big, 1.0)[:, None]  # deep gradients underflow when squared
    nrm = np.linalg.norm(G, axis=1)
    keep = nrm > 0
    n = G[keep] / nrm[keep, None]
    hs = np.column_stack([n, -np.sum(n * P[keep], axis=1)])
    inter = HalfspaceIntersection(hs, np.asarray(field.anchor, dtype=float))
    return PointHull(inter.intersections)


def sublevel_body(field, log_r: float, N: int = 2048) -> ConvexBody:
    """The sublevel set ``[f <= min f + exp(log_r)]`` as a convex body.

    Exact for the counterexample; otherwise a :class:`TracedBody`.
    """
    cex = getattr(field, "cex", None)
    if cex is not None:
        return _SublevelBody(cex, cex.coord_of_log_excess(float(log_r)))
    return TracedBody(field, log_r, N)


def check_sublevel_lipschitz(field, phi, pairs=None, log_pairs=None, mode: str = "sublevel",
                             k: float = 1.0, N: int = 1024, tol: float = 1e-6) -> CheckReport:
    """Test ``Dist(S(r1), S(r2)) <= k |phi(r1) - phi(r2)|`` on level pairs.

    ``S`` is the sublevel mapping (``mode="sublevel"``, Hausdorff distance
    of convex bodies) or the level mapping (``mode="level"``, Hausdorff
    distance of traced curves; smooth fields only).
    """
    if log_pairs is None:
        log_pairs = [(math.log(a), math.log(b)) for a, b in pairs]
    if mode == "level" and not field.smooth:
        raise ValueError("level mode needs a smooth field")
    if mode not in ("sublevel", "level"):
        raise ValueError(f"unknown mode {mode!r}")
    cache = {}

    def body(le):
        if le not in cache:
            if mode == "sublevel":
                cache[le] = sublevel_body(field, le, N)
            else:
                cache[le] = trace_level(field, log_r=le, N=N)
        return cache[le]

    margins, dists, levels = [], [], []
    for l1, l2 in log_pairs:
        if l1 == l2:
            d = 0.0
        elif mode == "sublevel":
            d = hausdorff_dist(body(l1), body(l2), max(N, 64))
        else:
            A, B = body(l1), body(l2)
            d = max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0])
        bound = k * abs(float(_phi_at_log(phi, l1)) - float(_phi_at_log(phi, l2)))
        margins.append(bound - d if math.isfinite(bound) else -math.inf)
        dists.append(d)
        levels.append(math.exp(l1))
    return verdict_from_margin(f"{mode}_lipschitz", margins, tol, levels=levels,
                               extra={"dist": dists, "margins": margins})


def compose(field, phi):
    """The field ``phi(f - min f)`` (minimum 0), for pairs ``(phi, dphi)``
    or built desingularisers."""
    from .zoo import ScalarField

    def value(X):
        with np.errstate(divide="ignore"):
            return _phi_at_log(phi, field.log_excess(np.asarray(X, dtype=float)))

    def grad(X):
        X = np.asarray(X, dtype=float)
        le = field.log_excess(X)
        g = np.asarray(field.grad(X), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.exp(_log_dphi(phi, le))
        s = np.where(np.isfinite(le), s, 0.0)
        return np.asarray(s)[..., None] * g

    return ScalarField(name=f"phi({field.name})", value=value, grad=grad, convex=False,
                       smooth=False, min_value=0.0, anchor=field.anchor)


def check_error_bound(field, k: float, r: float, X=None, n: int = 1000, r0: float = 1.0,
                      seed: int = 0, phi=None, N: int = 2048, tol: float = 1e-9) -> CheckReport:
    """Test ``dist(x, [f <= r]) <= k (f(x) - r)^+`` at samples.

    With ``phi`` the check is made on ``phi o f``: the right-hand side
    becomes ``k (phi(f(x)) - phi(r))^+`` while the sublevel set is the
    same.  Default samples are drawn in the band ``[r, r0]``.
    """
    if X is None:
        X, _ = sample_band(field, r, r0, n, seed)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    body = sublevel_body(field, math.log(r), N)
    le = field.log_excess(X)
    if phi is None:
        rhs = k * np.maximum(np.exp(le) - r, 0.0)
    else:
        rhs = k * np.maximum(np.asarray(_phi_at_log(phi, le), dtype=float)
                             - float(_phi_at_log(phi, math.log(r))), 0.0)
    if isinstance(body, TracedBody):
        dist = body.distance(X)
    else:
        dist = np.array([max(0.0, max_violation(body, x, N)[0]) for x in X])
    return verdict_from_margin("error_bound", rhs - dist, tol, points=X, levels=np.exp(le),
                               extra={"k": k, "r": r})


# ------------------------------------------------------------------ talweg
def _talweg_once(field, log_r, R, N):
    J = len(log_r)
    th = direction_grid(N)
    targets = np.array([field.log_level_rank(float(v)) for v in log_r])
    _, X = _radial_solve(field, np.tile(th, J), np.repeat(targets, N))
    X = X.reshape(J, N, 2)
    ls = field.log_slope(X.reshape(-1, 2)).reshape(J, N)
    smin = ls.min(axis=1)
    sel = []
    prev = None
    for j in range(J):
        ok = np.nonzero(ls[j] <= smin[j] + math.log(R))[0]
        if ok.size == 0:
            raise EmptyValley(f"no valley point at level {math.exp(log_r[j]):.6e}")
        if prev is None:
            i = int(np.argmin(ls[j]))
        else:
            i = int(ok[np.argmin(np.linalg.norm(X[j, ok] - prev, axis=1))])
        prev = X[j, i]
        sel.append(prev)
    poly = np.array(sel)
    return poly, float(np.sum(np.linalg.norm(np.diff(poly, axis=0), axis=1)))


def extract_talweg(field, R: float, r=None, log_r=None, N: int = 1024, rel_tol: float = 0.01):
    """Nearest-neighbour selection through the ``R``-valleys of a level grid.

    Returns ``(polyline, length, report)``; the report passes when the
    length changes by less than ``rel_tol`` after doubling the grid.
    """
    if R < 1:
        raise ValueError("valley factor must be at least 1")
    log_r = _grid_from(r, log_r)
    poly, length = _talweg_once(field, log_r, R, N)
    fine = np.empty(2 * len(log_r) - 1)
    fine[0::2] = log_r
    fine[1::2] = 0.5 * (log_r[:-1] + log_r[1:])
    _, length2 = _talweg_once(field, fine, R, N)
    change = abs(length2 - length) / max(length, 1e-300)
    ok = math.isfinite(length) and change < rel_tol
    report = CheckReport("talweg", PASS if ok else FAIL, None, float(math.exp(log_r[-1])),
                         rel_tol - change, rel_tol,
                         {"length": length, "length_refined": length2})
    return poly, length, report


# ------------------------------------------------------ growth and tails
def growth_phi(alpha: float, rho=None, check: bool = True):
    """Desingulariser built from the growth function ``m(s) = exp(-s^(-alpha))``.

    ``phi(rho) = int_0^rho (-log s)^(-1/alpha) / s ds``, computed by
    adaptive quadrature in ``t = -log s`` and compared with the
    antiderivative ``(-log rho)^(1 - 1/alpha) / (1/alpha - 1)``.  Returns
    ``phi(rho)`` or, without ``rho``, the evaluator.

    Raises
    ------
    Divergent
        For ``alpha >= 1`` (the integrand is not integrable at 0).
    """
    alpha = float(alpha)
    if alpha >= 1.0:
        raise Divergent(f"alpha={alpha} gives a non-integrable tail")
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    q = 1.0 / alpha

    def phi(x):
        x = float(x)
        if not 0.0 <= x < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if x == 0.0:
            return 0.0
        T = -math.log(x)
        val, err = quad(lambda t: t ** (-q), T, math.inf, epsabs=0.0, epsrel=1e-12, limit=200)
        if check:
            exact = T ** (1.0 - q) / (q - 1.0)
            if abs(val - exact) > 1e-8 * max(exact, 1e-300):
                raise ValueError(f"quadrature {val!r} disagrees with antiderivative {exact!r}")
        return val

    if rho is None:
        return np.vectorize(phi, otypes=[float])
    return phi(rho)


@dataclass(frozen=True)
class IntegrabilityResult:
    verdict: str
    contributions: np.ndarray
    ratios: np.ndarray


def integrability_test(u, r, window: int = 10) -> IntegrabilityResult:
    """Octave-wise decay test of ``int_0 u``.

    ``r`` is a decreasing geometric grid; consecutive nodes bound the
    intervals whose contributions are compared.  CONVERGENT when the last
    ``window`` ratios are all below 0.95, DIVERGENT when the contributions
    are non-decreasing over the last ``window`` intervals.
    """
    r = np.asarray(r, dtype=float)
    u = np.asarray(u, dtype=float)
    if len(r) < window + 2:
        raise ValueError("grid too short for the decay test")
    lr, lu = np.log(r), np.log(u)
    contrib = []
    for i in range(len(r) - 1):
        d = lr[i] - lr[i + 1]
        b = (lu[i] - lu[i + 1]) / d
        contrib.append(math.exp(lu[i + 1] + lr[i + 1]) * d * _expm1_over((b + 1.0) * d))
    contrib = np.array(contrib)
    ratios = contrib[1:] / contrib[:-1]
    tail = ratios[-window:]
    if np.all(tail < 0.95):
        verdict = "CONVERGENT"
    elif np.all(tail >= 1.0 - 1e-9):
        verdict = "DIVERGENT"
    else:
        verdict = "INCONCLUSIVE"
    return IntegrabilityResult(verdict, contrib, ratios)
