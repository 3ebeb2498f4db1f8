"""Scalar fields on the plane and a library of closed-form test functions.

Every field is evaluated in a vectorised way: ``value`` maps an array of
shape ``(..., 2)`` to ``(...)`` and ``grad`` returns the minimal-norm
subgradient with shape ``(..., 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import OutOfDomain

__all__ = [
    "ScalarField",
    "ZooEntry",
    "power",
    "quad",
    "norm",
    "flat",
    "make_field",
    "zoo_entries",
    "eval_grad",
    "strong_slope",
]


def _norm(X):
    X = np.asarray(X, dtype=float)
    return np.hypot(X[..., 0], X[..., 1])  # no underflow for tiny vectors


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A function on the plane with first-order information and oracles.

    Parameters
    ----------
    name : str
        Specification string that rebuilds the field via :func:`make_field`.
    value, grad : callable
        Vectorised evaluation and minimal-norm subgradient.
    alpha : float
        Semiconvexity modulus: ``f + alpha/2 |x|^2`` is convex.
    convex, smooth : bool
        Convexity and differentiability flags.  Non-smooth fields are
        integrated with implicit (proximal) steps.
    min_value : float
        Global minimum of ``f``.  Level values ``r`` used by the analysis
        routines are measured above this value.
    lipschitz : callable, optional
        ``radius -> L``, a Lipschitz constant of ``grad`` on the centred
        ball of that radius.
    u_oracle, phi_oracle, dphi_oracle : callable, optional
        Closed forms of the inverse minimal slope on level ``r``, of a
        desingularising function and of its derivative.
    prox_oracle : callable, optional
        ``(x, lam) -> prox`` in closed form.
    flow_oracle : callable, optional
        ``(x0, t) -> point`` of the gradient curve.
    prox_solver : callable, optional
        Exact proximal map used by the flow integrator instead of the
        generic inner solver.
    shifted_min_norm : callable, optional
        ``(y, v) -> `` minimal-norm element of ``df(y) + v``.  Needed at
        kinks; defaults to ``grad(y) + v``.
    log_excess_fn : callable, optional
        ``log(f - min f)`` when that is better computed directly.
    rank_fn, rank_of_log_level : callable, optional
        A continuous strictly increasing reparametrisation of values and
        the corresponding map on ``log(r)`` for levels ``min f + r``; used
        by level tracing when values saturate in floating point.
    log_slope_fn : callable, optional
        ``log |grad f|``, for fields whose slopes underflow.
    singular_points : tuple
        Points where the field is not differentiable.
    """

    name: str
    value: Callable
    grad: Callable
    alpha: float = 0.0
    convex: bool = True
    smooth: bool = True
    min_value: float = 0.0
    argmin: str = "{0}"
    anchor: tuple = (0.0, 0.0)
    domain: Optional[Callable] = None
    lipschitz: Optional[Callable] = None
    u_oracle: Optional[Callable] = None
    phi_oracle: Optional[Callable] = None
    dphi_oracle: Optional[Callable] = None
    prox_oracle: Optional[Callable] = None
    flow_oracle: Optional[Callable] = None
    prox_solver: Optional[Callable] = None
    shifted_min_norm: Optional[Callable] = None
    log_excess_fn: Optional[Callable] = None
    rank_fn: Optional[Callable] = None
    rank_of_log_level: Optional[Callable] = None
    log_slope_fn: Optional[Callable] = None
    singular_points: tuple = ()
    formulas: dict = dc_field(default_factory=dict)

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def in_domain(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return False
        return True if self.domain is None else bool(self.domain(x))

    def log_excess(self, X):
        """``log(f(X) - min f)``, ``-inf`` on the minimiser set."""
        X = np.asarray(X, dtype=float)
        if self.log_excess_fn is not None:
            return self.log_excess_fn(X)
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(self.value(X) - self.min_value, 0.0))

    def rank(self, X):
        X = np.asarray(X, dtype=float)
        return self.rank_fn(X) if self.rank_fn is not None else self.log_excess(X)

    def level_rank(self, r):
        """Rank of the level ``min f + r``."""
        return self.log_level_rank(math.log(r) if r > 0 else -math.inf)

    def log_level_rank(self, le):
        """Rank of the level ``min f + exp(le)``."""
        if self.rank_of_log_level is not None:
            return self.rank_of_log_level(le)
        return le

    def log_slope(self, X):
        """``log |grad f(X)|`` for a batch of points."""
        X = np.asarray(X, dtype=float)
        if self.log_slope_fn is not None:
            return self.log_slope_fn(X)
        with np.errstate(divide="ignore"):
            return np.log(_norm(self.grad(X)))

    def min_norm_shifted(self, y, v):
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.shifted_min_norm is not None:
            return self.shifted_min_norm(y, v)
        return self.grad(y) + v


@dataclass(frozen=True)
class ZooEntry:
    name: str
    field: ScalarField
    formulas: dict


# ----------------------------------------------------------------- POWER
def power(p: float) -> ScalarField:
    """``f(x) = |x|^p`` for ``1 < p <= 4``."""
    p = float(p)
    if not 1.0 < p <= 4.0:
        raise ValueError("power exponent must lie in (1, 4]")

    def value(X):
        return _norm(X) ** p

    def grad(X):
        X = np.asarray(X, dtype=float)
        r = _norm(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, p * r ** (p - 2.0), 0.0)
        return scale[..., None] * X

    def u(r):
        return np.asarray(r, dtype=float) ** (-(p - 1.0) / p) / p

    def phi(r):
        return np.asarray(r, dtype=float) ** (1.0 / p)

    def dphi(r):
        return np.asarray(r, dtype=float) ** (1.0 / p - 1.0) / p

    def prox(x, lam):
        x = np.asarray(x, dtype=float)
        s0 = float(np.linalg.norm(x))
        if s0 == 0.0:
            return x.copy()
        if p == 2.0:
            return x / (1.0 + 2.0 * lam)
        s = brentq(lambda s: s + lam * p * s ** (p - 1.0) - s0, 0.0, s0, xtol=1e-16, rtol=1e-15)
        return x * (s / s0)

    def flow(x0, t):
        x0 = np.asarray(x0, dtype=float)
        s0 = float(np.linalg.norm(x0))
        if s0 == 0.0:
            return x0.copy()
        if p == 2.0:
            return x0 * math.exp(-2.0 * t)
        base = s0 ** (2.0 - p) + p * (p - 2.0) * t
        if base <= 0.0:
            return np.zeros(2)
        return x0 * (base ** (1.0 / (2.0 - p)) / s0)

    def lip(radius):
        return p * (p - 1.0) * radius ** (p - 2.0) if p >= 2.0 else math.inf

    formulas = {
        "f": f"|x|^{p:g}",
        "grad": "p |x|^(p-2) x",
        "u(r)": "r^(-(p-1)/p) / p",
        "phi(r)": "r^(1/p)",
    }
    return ScalarField(
        name=f"power:{p:g}",
        value=value,
        grad=grad,
        lipschitz=lip,
        u_oracle=u,
        phi_oracle=phi,
        dphi_oracle=dphi,
        prox_oracle=prox,
        flow_oracle=flow,
        formulas=formulas,
    )


# ------------------------------------------------------------------ QUAD
def quad(A) -> ScalarField:
    """``f(x) = <Ax, x>/2`` for a symmetric positive definite 2x2 ``A``.

    ``A`` may be given as a matrix, or as its two diagonal entries.
    """
    A = np.asarray(A, dtype=float)
    if A.shape == (2,):
        A = np.diag(A)
    if A.shape != (2, 2) or not np.allclose(A, A.T):
        raise ValueError("quad needs a symmetric 2x2 matrix")
    evals, evecs = np.linalg.eigh(A)
    if evals[0] <= 0:
        raise ValueError("quad needs a positive definite matrix")
    lmin, lmax = float(evals[0]), float(evals[1])

    def value(X):
        X = np.asarray(X, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", X, A, X)

    def grad(X):
        return np.asarray(X, dtype=float) @ A

    def u(r):
        return 1.0 / np.sqrt(2.0 * np.asarray(r, dtype=float) * lmin)

    def phi(r):
        return np.sqrt(2.0 * np.asarray(r, dtype=float) / lmin)

    def prox(x, lam):
        return np.linalg.solve(np.eye(2) + lam * A, np.asarray(x, dtype=float))

    def flow(x0, t):
        return evecs @ (np.exp(-evals * t) * (evecs.T @ np.asarray(x0, dtype=float)))

    diag = np.allclose(A, np.diag(np.diag(A)))
    spec = ",".join(f"{v:g}" for v in (np.diag(A) if diag else A.ravel()))
    return ScalarField(
        name=f"quad:{spec}",
        value=value,
        grad=grad,
        lipschitz=lambda radius: lmax,
        u_oracle=u,
        phi_oracle=phi,
        dphi_oracle=u,
        prox_oracle=prox,
        flow_oracle=flow,
        formulas={"f": "<Ax,x>/2", "grad": "Ax", "u(r)": "1/sqrt(2 r lambda_min)",
                  "phi(r)": "sqrt(2 r / lambda_min)"},
    )


# ------------------------------------------------------------------ NORM
def norm() -> ScalarField:
    """``f(x) = |x|``, non-smooth at the origin."""

    def value(X):
        return _norm(X)

    def grad(X):
        X = np.asarray(X, dtype=float)
        r = _norm(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, 1.0 / r, 0.0)
        return scale[..., None] * X

    def shifted(y, v):
        if np.linalg.norm(y) > 0:
            return grad(y) + v
        # subdifferential at 0 is the closed unit ball
        nv = np.linalg.norm(v)
        return v * max(0.0, 1.0 - 1.0 / nv) if nv > 0 else v

    def prox(x, lam):
        x = np.asarray(x, dtype=float)
        s = float(np.linalg.norm(x))
        return x * max(0.0, 1.0 - lam / s) if s > 0 else x.copy()

    def flow(x0, t):
        x0 = np.asarray(x0, dtype=float)
        s = float(np.linalg.norm(x0))
        return x0 * max(0.0, 1.0 - t / s) if s > 0 else x0.copy()

    return ScalarField(
        name="norm",
        value=value,
        grad=grad,
        smooth=False,
        u_oracle=lambda r: np.ones_like(np.asarray(r, dtype=float)),
        phi_oracle=lambda r: np.asarray(r, dtype=float),
        dphi_oracle=lambda r: np.ones_like(np.asarray(r, dtype=float)),
        prox_oracle=prox,
        flow_oracle=flow,
        shifted_min_norm=shifted,
        singular_points=((0.0, 0.0),),
        formulas={"f": "|x|", "grad": "x/|x|", "u(r)": "1", "phi(r)": "r"},
    )


# ------------------------------------------------------------------ FLAT
def _flat_radial(a):
    def f(t):
        return math.exp(-t ** (-a)) if t > 0 else 0.0

    def d2(t):
        return f(t) * (a * a * t ** (-2 * a - 2) - a * (a + 1) * t ** (-a - 2))

    def d1(t):
        return a * t ** (-a - 1) * f(t)

    return f, d1, d2


def _flat_curvature_bounds(a, tmax):
    """Return ``(max(-f''), max(|f''|, f'/t))`` over radii ``(0, tmax]``."""
    _, d1, d2 = _flat_radial(a)
    ts = np.geomspace(1e-3, tmax, 4000)
    neg = np.array([-d2(t) for t in ts])
    i = int(np.argmax(neg))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]
    res = minimize_scalar(d2, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    semi = max(0.0, float(neg[i]), -float(res.fun))
    curv = max(max(abs(d2(t)), d1(t) / t) for t in ts)
    return semi, curv


def flat(a: float) -> ScalarField:
    """``f(x) = exp(-|x|^(-a))`` with ``f(0) = 0``, for ``0 < a < 1``.

    All derivatives vanish at the origin.  The field is not convex; its
    semiconvexity modulus is the largest negative radial curvature,
    computed numerically.
    """
    a = float(a)
    if not 0.0 < a < 1.0:
        raise ValueError("flatness exponent must lie in (0, 1)")
    semi, _ = _flat_curvature_bounds(a, 100.0)

    def log_excess(X):
        t = _norm(X)
        with np.errstate(divide="ignore"):
            return np.where(t > 0, -(np.where(t > 0, t, 1.0) ** (-a)), -np.inf)

    def value(X):
        return np.exp(log_excess(X))

    def grad(X):
        X = np.asarray(X, dtype=float)
        t = _norm(X)
        le = log_excess(X)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ts = np.where(t > 0, t, 1.0)
            scale = np.where(np.exp(le) > 0, a * np.exp(le - (a + 2.0) * np.log(ts)), 0.0)
        return scale[..., None] * X

    def u(r):
        r = np.asarray(r, dtype=float)
        L = -np.log(r)
        return 1.0 / (a * r * L ** ((a + 1.0) / a))

    def phi(r):
        return (-np.log(np.asarray(r, dtype=float))) ** (-1.0 / a)

    def lip(radius):
        return _flat_curvature_bounds(a, radius)[1]

    return ScalarField(
        name=f"flat:{a:g}",
        value=value,
        grad=grad,
        alpha=semi,
        convex=False,
        lipschitz=lip,
        u_oracle=u,
        phi_oracle=phi,
        dphi_oracle=u,
        log_excess_fn=log_excess,
        formulas={"f": f"exp(-|x|^(-{a:g}))", "u(r)": "1/(a r (-log r)^((a+1)/a))",
                  "phi(r)": "(-log r)^(-1/a)"},
    )


# -------------------------------------------------------------- registry
def make_field(spec: str) -> ScalarField:
    """Build a field from a specification string.

    Examples: ``"power:2"``, ``"quad:1,4"``, ``"quad:2,1,1,3"`` (full
    matrix, row major), ``"norm"``, ``"flat:0.5"``, ``"cex"`` or
    ``"cex:12"`` (counterexample built through generation 12).
    """
    name, _, arg = spec.strip().partition(":")
    name = name.lower()
    try:
        if name == "power":
            return power(float(arg) if arg else 2.0)
        if name == "quad":
            vals = [float(v) for v in arg.split(",")] if arg else [1.0, 1.0]
            if len(vals) == 2:
                return quad(np.diag(vals))
            if len(vals) == 4:
                return quad(np.array(vals).reshape(2, 2))
            raise ValueError("quad takes 2 diagonal or 4 matrix entries")
        if name == "norm":
            return norm()
        if name == "flat":
            return flat(float(arg) if arg else 0.5)
        if name == "cex":
            from .counterexample import cex_field

            return cex_field(int(arg) if arg else 12)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad field spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown field {spec!r}")


def zoo_entries() -> list:
    """The built-in entries with default parameters."""
    out = []
    for spec in ("power:2", "quad:1,4", "norm", "flat:0.5"):
        f = make_field(spec)
        out.append(ZooEntry(spec, f, f.formulas))
    out.append(ZooEntry("cex", None, {"f": "convex function with prescribed sublevel sets"}))
    return out


# ------------------------------------------------------------ operations
def eval_grad(field: ScalarField, x):
    """Return ``(f(x), minimal-norm subgradient)`` at a single point."""
    x = np.asarray(x, dtype=float)
    if not field.in_domain(x):
        raise OutOfDomain(f"{x} outside the domain of {field.name}")
    return float(field.value(x)), np.asarray(field.grad(x), dtype=float)


def strong_slope(field: ScalarField, x, radii=None, M: int = 64) -> float:
    """Estimate the strong slope ``limsup (f(x) - f(y))^+ / |x - y|``.

    For each radius the sphere is sampled at ``M`` angles and the best
    angle refined by a bounded scalar search.  The estimate is accepted
    once two successive radii agree to ``1e-4`` relative; otherwise the
    larger of the last two estimates is returned.
    """
    x = np.asarray(x, dtype=float)
    if not field.in_domain(x):
        raise OutOfDomain(f"{x} outside the domain of {field.name}")
    if M < 32:
        raise ValueError("need at least 32 samples per radius")
    radii = np.geomspace(1e-2, 1e-8, 7) if radii is None else np.asarray(radii, dtype=float)
    fx = float(field.value(x))
    th = 2 * math.pi * np.arange(M) / M

    def drop(theta, rho):
        y = x + rho * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return np.maximum(fx - field.value(y), 0.0) / rho

    estimates = []
    for rho in radii:
        vals = drop(th, rho)
        i = int(np.argmax(vals))
        w = 2 * math.pi / M
        res = minimize_scalar(lambda t: -float(drop(np.array([t]), rho)[0]),
                              bounds=(th[i] - w, th[i] + w), method="bounded",
                              options={"xatol": 1e-10})
        estimates.append(max(float(vals[i]), -float(res.fun)))
        if len(estimates) >= 2:
            a, b = estimates[-2], estimates[-1]
            if abs(a - b) <= 1e-4 * max(abs(a), abs(b)):
                return max(a, b)
    return max(estimates[-2:])
