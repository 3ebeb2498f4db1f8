"""Steepest-descent curves of scalar fields.

Smooth fields are integrated with an embedded Dormand-Prince 5(4) pair.
A step is accepted only when both the local error estimate and the local
energy residual ``|f_i - f_{i+1} - h (v_i^2 + v_{i+1}^2) / 2|`` are within
tolerance, so that the discrete curve satisfies the energy identity
``f(x_0) - f(x_T) = int |x'|^2 dt`` to the requested accuracy.

Non-smooth fields use implicit Euler steps ``x_{i+1} = prox_h(x_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfDomain, Overlap, Stalled

__all__ = [
    "Trajectory",
    "PiecewiseTrajectory",
    "integrate_flow",
    "curve_length",
    "compose_piecewise",
]

GRAD_STOP = 1e-10

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Discrete curve with times, points, values, speeds and cumulative length.

    ``mode`` is ``"rk"`` for explicit integration (length is the trapezoid
    rule on speeds) or ``"prox"`` for implicit steps (length is the sum of
    chords, the length of the computed polygonal curve).
    """

    t: np.ndarray
    x: np.ndarray
    f: np.ndarray
    speed: np.ndarray
    cumlen: np.ndarray
    mode: str = "rk"
    stop_reason: str = "horizon"

    def __len__(self):
        return len(self.t)

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])

    @property
    def dissipated(self) -> float:
        """Trapezoid approximation of ``int |x'|^2 dt``."""
        if len(self.t) < 2:
            return 0.0
        v2 = self.speed ** 2
        return float(np.sum(0.5 * (v2[1:] + v2[:-1]) * np.diff(self.t)))

    @property
    def energy_residual(self) -> float:
        return abs(float(self.f[0] - self.f[-1]) - self.dissipated)

    @property
    def chordal_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.x, axis=0), axis=1)))


@dataclass(frozen=True, eq=False)
class PiecewiseTrajectory:
    segments: tuple
    intervals: tuple

    @property
    def length(self) -> float:
        return math.fsum(s.length for s in self.segments)


def _dp_step(grad, x, h, k1):
    ks = [k1]
    for i in range(1, 7):
        xi = x + h * sum(a * k for a, k in zip(_A[i], ks))
        ks.append(-grad(xi))
    x5 = x + h * sum(b * k for b, k in zip(_B5, ks))
    err = h * sum((b5 - b4) * k for b5, b4, k in zip(_B5, _B4, ks))
    return x5, err, ks[6]


def _initial_step(x, v, tol):
    return min(0.1, (tol ** 0.2) * max(1.0, float(np.linalg.norm(x))) / max(v, 1e-300))


def integrate_flow(field, x0, T=None, stop=None, tol: float = 1e-10,
                   tol_energy: float = 1e-7, max_steps: int = 500_000,
                   step_target: float | None = None) -> Trajectory:
    """Integrate ``x' = -grad f(x)`` from ``x0``.

    Parameters
    ----------
    field : ScalarField
    x0 : array_like
        Starting point.
    T : float, optional
        Time horizon.
    stop : float, optional
        Stop when the value reaches this level; the crossing is located
        by bisection on the last step to ``1e-12`` in ``f``.
    tol : float
        Local error tolerance of the explicit scheme, in ``[1e-12, 1e-3]``.
    tol_energy : float
        Relative tolerance of the local energy residual.
    step_target : float, optional
        Target displacement per implicit step (non-smooth fields).

    Returns
    -------
    Trajectory
    """
    if T is None and stop is None:
        raise ValueError("give a horizon T or a stop level")
    if not 1e-12 <= tol <= 1e-3:
        raise ValueError("tol must lie in [1e-12, 1e-3]")
    x0 = np.asarray(x0, dtype=float)
    if not field.in_domain(x0):
        raise OutOfDomain(f"{x0} outside the domain of {field.name}")
    T = math.inf if T is None else float(T)
    if field.smooth:
        return _integrate_rk(field, x0, T, stop, tol, tol_energy, max_steps)
    return _integrate_prox(field, x0, T, stop, max_steps, step_target)


def _finish(ts, xs, fs, vs, mode, reason):
    t = np.array(ts)
    x = np.array(xs)
    v = np.array(vs)
    if mode == "rk":
        seg = 0.5 * (v[1:] + v[:-1]) * np.diff(t)
    else:
        seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return Trajectory(t, x, np.array(fs), v, cum, mode, reason)


def _constant(x0, f0, v0, T, mode):
    ts = [0.0] if not math.isfinite(T) else [0.0, T]
    return _finish(ts, [x0] * len(ts), [f0] * len(ts), [v0] * len(ts), mode, "critical")


def _integrate_rk(field, x0, T, stop, tol, tol_energy, max_steps):
    grad = field.grad
    value = field.value
    x = x0.copy()
    f = float(value(x))
    k1 = -np.asarray(grad(x), dtype=float)
    v = float(np.linalg.norm(k1))
    if v < GRAD_STOP or (stop is not None and f <= stop):
        return _constant(x0, f, v, T, "rk")
    ts, xs, fs, vs = [0.0], [x.copy()], [f], [v]
    t = 0.0
    h = _initial_step(x, v, tol)
    reason = "horizon"
    for _ in range(max_steps):
        if t >= T or (math.isfinite(T) and T - t <= 1e-14 * max(1.0, T)):
            break  # horizon reached up to rounding
        h = min(h, T - t)
        if h <= 1e-14 * max(1.0, t):
            raise Stalled(f"step size underflow at t={t}")
        xn, err, kn = _dp_step(grad, x, h, k1)
        scale = tol + tol * max(float(np.linalg.norm(x)), float(np.linalg.norm(xn)))
        e = float(np.linalg.norm(err)) / scale
        fn = float(value(xn))
        vn = float(np.linalg.norm(kn))
        df = f - fn
        res = abs(df - 0.5 * h * (v * v + vn * vn))
        allow = tol_energy * max(df, 0.0) + 4e-16 * abs(f)
        fac_e = 0.9 * e ** -0.2 if e > 0 else 5.0
        fac_r = 0.9 * (allow / res) ** (1.0 / 3.0) if res > 0 else 5.0
        if e > 1.0 or res > allow:
            h *= max(0.1, min(fac_e, fac_r, 0.9))
            continue
        if stop is not None and fn < stop:
            lo, hi = 0.0, h
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                xm, _, km = _dp_step(grad, x, mid, k1)
                fm = float(value(xm))
                if abs(fm - stop) <= 1e-12:
                    break
                lo, hi = (mid, hi) if fm > stop else (lo, mid)
            xn, kn, fn, h = xm, km, fm, mid
            vn = float(np.linalg.norm(kn))
            reason = "level"
        t += h
        x, f, v, k1 = xn, fn, vn, kn
        ts.append(t)
        xs.append(x.copy())
        fs.append(f)
        vs.append(v)
        if reason == "level":
            break
        if v < GRAD_STOP:
            reason = "critical"
            break
        h *= min(5.0, max(0.2, min(fac_e, fac_r)))
    else:
        raise Stalled(f"step budget of {max_steps} exhausted at t={t}")
    return _finish(ts, xs, fs, vs, "rk", reason)


def _prox_map(field):
    if field.prox_solver is not None:
        return field.prox_solver
    from .algorithms import prox

    def step(x, h):
        return prox(field, h, x)

    return step


def _integrate_prox(field, x0, T, stop, max_steps, step_target):
    proxh = _prox_map(field)
    value = field.value

    def speed(x):
        return float(np.linalg.norm(field.grad(x)))

    x = x0.copy()
    f = float(value(x))
    v = speed(x)
    if v < GRAD_STOP or (stop is not None and f <= stop):
        return _constant(x0, f, v, T, "prox")
    target = step_target if step_target is not None else 1e-2 * (1.0 + float(np.linalg.norm(x0)))
    h = target / v
    ts, xs, fs, vs = [0.0], [x.copy()], [f], [v]
    t = 0.0
    reason = "horizon"
    for _ in range(max_steps):
        if t >= T or (math.isfinite(T) and T - t <= 1e-14 * max(1.0, T)):
            break  # horizon reached up to rounding
        h = min(h, T - t)
        if h <= 1e-14 * max(1.0, t):
            raise Stalled(f"step size underflow at t={t}")
        xn = proxh(x, h)
        fn = float(value(xn))
        if stop is not None and fn < stop:
            lo, hi = 0.0, h
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                xm = proxh(x, mid)
                fm = float(value(xm))
                if abs(fm - stop) <= 1e-12 or hi - lo <= 1e-15 * hi:
                    break
                lo, hi = (mid, hi) if fm > stop else (lo, mid)
            xn, fn, h = xm, fm, mid
            reason = "level"
        disp = float(np.linalg.norm(xn - x))
        t += h
        x, f = xn, fn
        v = speed(x)
        ts.append(t)
        xs.append(x.copy())
        fs.append(f)
        vs.append(v)
        if reason == "level":
            break
        if v < GRAD_STOP:
            reason = "critical"
            break
        h *= min(2.0, max(0.5, target / disp)) if disp > 0 else 2.0
    else:
        raise Stalled(f"step budget of {max_steps} exhausted at t={t}")
    return _finish(ts, xs, fs, vs, "prox", reason)


def curve_length(traj: Trajectory) -> float:
    """Length of the trajectory (final cumulative length)."""
    return traj.length


def compose_piecewise(segments, tol: float = 1e-12) -> PiecewiseTrajectory:
    """Check that value ranges of distinct segments share at most one point.

    Raises
    ------
    Overlap
        With the first offending pair of indices.
    """
    intervals = tuple((float(np.min(s.f)), float(np.max(s.f))) for s in segments)
    for i in range(len(intervals)):
        for j in range(i + 1, len(intervals)):
            lo = max(intervals[i][0], intervals[j][0])
            hi = min(intervals[i][1], intervals[j][1])
            if hi - lo > tol * max(1.0, abs(hi)):
                raise Overlap(i, j)
    return PiecewiseTrajectory(tuple(segments), intervals)
