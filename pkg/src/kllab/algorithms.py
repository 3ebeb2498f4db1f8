"""Proximal point and explicit gradient schemes with length certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import CertFail, DescentViolation, NoConvergence, StepTooLarge
from .reports import FAIL, PASS, CheckReport, verdict_from_margin

__all__ = [
    "IterateRun",
    "prox",
    "proximal_run",
    "gradient_run",
    "step_estimates_check",
    "hessian_bound",
    "estimate_limit",
]


@dataclass(frozen=True, eq=False)
class IterateRun:
    """Iterates of a descent scheme.

    Row ``k`` of the arrays describes iterate ``Y_k``; ``step[k]`` and
    ``disp[k]`` belong to the move from ``Y_{k-1}`` to ``Y_k`` (zero for
    ``k = 0``).  ``cert_margin[k]`` is the scheme's certificate margin at
    ``Y_k``; ``step_margin[k]`` the per-step certificate of the move into
    ``Y_k``.
    """

    Y: np.ndarray
    f: np.ndarray
    step: np.ndarray
    disp: np.ndarray
    cumlen: np.ndarray
    cert_margin: np.ndarray
    step_margin: np.ndarray
    limit_value: float = float("nan")
    limit_point: np.ndarray = dc_field(default_factory=lambda: np.full(2, np.nan))

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])


# ------------------------------------------------------------------ prox
def prox(field, lam: float, x, tol: float = 1e-10, max_inner: int = 500):
    """Minimiser of ``y -> f(y) + |y - x|^2 / (2 lam)``.

    Fields with an exact proximal solver use it.  Otherwise the declared
    singular points are tested first (a kink is the answer when the
    shifted subdifferential contains 0), then gradient descent with
    Barzilai-Borwein trial steps and Armijo backtracking runs on the
    strongly convex subproblem until its gradient norm is below ``tol``.

    Raises
    ------
    StepTooLarge
        When ``lam >= 1/alpha`` for the field's semiconvexity modulus.
    NoConvergence
        When ``max_inner`` iterations do not reach ``tol``.
    """
    x = np.asarray(x, dtype=float)
    if lam <= 0:
        raise ValueError("prox parameter must be positive")
    if field.alpha > 0 and lam * field.alpha >= 1.0:
        raise StepTooLarge(f"lambda={lam} >= 1/alpha={1 / field.alpha}")
    if field.prox_solver is not None:
        return np.asarray(field.prox_solver(x, lam), dtype=float)

    def phi(y):
        d = y - x
        return float(field.value(y)) + float(d @ d) / (2.0 * lam)

    def G(y):
        return np.asarray(field.min_norm_shifted(y, (y - x) / lam), dtype=float)

    for s in field.singular_points:
        s = np.asarray(s, dtype=float)
        if np.linalg.norm(G(s)) <= tol:
            return s.copy()

    y = x.copy()
    g = G(y)
    fy = phi(y)
    L = field.lipschitz(1.0 + 2.0 * float(np.linalg.norm(x))) if field.lipschitz else None
    step = lam / (1.0 + lam * L) if L is not None and math.isfinite(L) else lam
    for _ in range(max_inner):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return y
        s = step
        while True:
            yn = y - s * g
            fn = phi(yn)
            gnew = G(yn)
            # near the solution value decreases drop below rounding, so a
            # clear drop of the gradient norm is accepted as well
            if (fn <= fy - 0.5 * s * gn * gn or float(np.linalg.norm(gnew)) <= 0.5 * gn
                    or s < 1e-300):
                break
            s *= 0.5
        dy, dg = yn - y, gnew - g
        curv = float(dy @ dg)
        step = float(dy @ dy) / curv if curv > 0 else 2.0 * s
        step = min(max(step, 1e-12 * lam), 1e6 * lam)
        y, g, fy = yn, gnew, fn
    if float(np.linalg.norm(g)) <= tol:
        return y
    raise NoConvergence(f"prox inner solver stopped with gradient norm {np.linalg.norm(g):.3e}")


def estimate_limit(values, points, window: int = 10):
    """Extrapolate the limit value and point of a geometrically converging run.

    The gap ratio is the geometric mean of the ratios of the last
    ``window`` consecutive value gaps (displacements for the point).
    """
    values = np.asarray(values, dtype=float)
    points = np.asarray(points, dtype=float)

    def tail(seq):
        seq = np.asarray(seq[-window:], dtype=float)
        if len(seq) < 2 or seq[-1] <= 0:
            return 0.0
        pos = seq[seq > 0]
        if len(pos) < 2:
            return 0.0
        q = (pos[-1] / pos[0]) ** (1.0 / (len(pos) - 1))
        return seq[-1] * q / (1.0 - q) if q < 1 else math.inf

    gaps = -np.diff(values)
    L = values[-1] - tail(gaps) if len(gaps) else values[-1]
    disp = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if len(disp) and disp[-1] > 0:
        t = tail(disp)
        direction = (points[-1] - points[-2]) / disp[-1]
        limit = points[-1] + (t if math.isfinite(t) else 0.0) * direction
    else:
        limit = points[-1].copy()
    return float(L), limit


def _schedule(lam, K):
    if callable(lam):
        return np.array([float(lam(k)) for k in range(K)])
    arr = np.asarray(lam, dtype=float)
    return np.full(K, float(arr)) if arr.ndim == 0 else arr[:K]


def proximal_run(field, x0, lam, phi, K: int, tol: float = 1e-9, strict: bool = False,
                 limit_value: float | None = None):
    """Proximal point iterations ``Y_{k+1} = prox_{lam_k}(Y_k)`` with certificates.

    Per step: ``|Y_{k+1} - Y_k| <= phi(f(Y_k) - L) - phi(f(Y_{k+1}) - L)``.
    Terminal: ``|Y_lim - Y_k| <= phi(f(Y_k) - L)``.  ``L`` and ``Y_lim``
    are extrapolated from the run unless ``limit_value`` is given.

    Returns
    -------
    (IterateRun, CheckReport)
    """
    lams = _schedule(lam, K)
    Y = [np.asarray(x0, dtype=float)]
    for k in range(K):
        Y.append(prox(field, lams[k], Y[-1]))
    Y = np.array(Y)
    f = np.asarray(field.value(Y), dtype=float)
    L, Ylim = estimate_limit(f, Y)
    if limit_value is not None:
        L = float(limit_value)
    excess = np.maximum(f - L, 0.0)
    ph = np.asarray(phi(excess), dtype=float)
    disp = np.concatenate([[0.0], np.linalg.norm(np.diff(Y, axis=0), axis=1)])
    step_margin = np.concatenate([[0.0], ph[:-1] - ph[1:] - disp[1:]])
    term = ph - np.linalg.norm(Ylim - Y, axis=1)
    run = IterateRun(Y, f, np.concatenate([[0.0], lams]), disp, np.cumsum(disp),
                     term, step_margin, L, Ylim)
    margins = np.minimum(step_margin, term)
    report = verdict_from_margin("proximal_certificate", margins, tol, points=Y, levels=f,
                                 extra={"limit_value": L})
    if strict and report.verdict == FAIL:
        raise CertFail("proximal certificate violated", index=report.extra["index"], run=run)
    return run, report


def gradient_run(field, x0, t=None, beta: float = 0.5, phi=None, K: int = 100,
                 L: float | None = None, tol: float = 1e-6, strict: bool = False):
    """Explicit gradient steps with the sufficient-decrease and length checks.

    Parameters
    ----------
    t : float or None
        Fixed step.  ``None`` selects backtracking from ``1/L``, halving
        until the descent lemma holds.
    beta : float
        Constant of ``beta |grad f(Y_k)| |Y_{k+1} - Y_k| <= f(Y_k) - f(Y_{k+1})``.
    phi : callable
        Desingularising function on ``f - min f``; the cumulative length
        must stay below ``(phi(f_0) - phi(f_k)) / beta``.
    """
    x0 = np.asarray(x0, dtype=float)
    if L is None:
        L = field.lipschitz(float(np.linalg.norm(x0))) if field.lipschitz else None
    if t is not None:
        if L is not None and beta > 1.0 - L * t / 2.0 + 1e-15:
            raise ValueError("need beta <= 1 - L t / 2 for the fixed step rule")
    elif L is None:
        raise ValueError("backtracking needs a Lipschitz constant")
    Y = [x0]
    steps = [0.0]
    dec_margin = [0.0]
    y = x0
    for _ in range(K):
        g = np.asarray(field.grad(y), dtype=float)
        fy = float(field.value(y))
        s = t if t is not None else 1.0 / L
        yn = y - s * g
        if t is None:
            while float(field.value(yn)) > fy - s * (1.0 - L * s / 2.0) * float(g @ g) and s > 1e-300:
                s *= 0.5
                yn = y - s * g
        fn = float(field.value(yn))
        dec_margin.append(fy - fn - beta * float(np.linalg.norm(g)) * float(np.linalg.norm(yn - y)))
        Y.append(yn)
        steps.append(s)
        y = yn
    Y = np.array(Y)
    f = np.asarray(field.value(Y), dtype=float)
    disp = np.concatenate([[0.0], np.linalg.norm(np.diff(Y, axis=0), axis=1)])
    cum = np.cumsum(disp)
    if phi is not None:
        ph = np.asarray(phi(np.maximum(f - field.min_value, 0.0)), dtype=float)
        bound_margin = (ph[0] - ph) / beta - cum
    else:
        bound_margin = np.full(len(f), np.nan)
    dec_margin = np.array(dec_margin)
    run = IterateRun(Y, f, np.array(steps), disp, cum, bound_margin, dec_margin)
    scale = 1e-12 * max(1.0, abs(float(f[0])))
    bad = np.nonzero(dec_margin < -scale)[0]
    if bad.size:
        i = int(bad[0])
        report = CheckReport("gradient_certificate", FAIL, tuple(Y[i - 1]), float(f[i - 1]),
                             float(dec_margin[i]), scale, {"index": i, "kind": "descent"})
        if strict:
            raise DescentViolation(f"sufficient decrease fails at step {i}", index=i, run=run)
        return run, report
    if phi is None:
        return run, CheckReport("gradient_certificate", PASS, None, None, float(np.min(dec_margin)),
                                tol, {"kind": "descent"})
    report = verdict_from_margin("gradient_certificate", bound_margin, tol, points=Y, levels=f,
                                 extra={"kind": "length"})
    return run, report


def step_estimates_check(field, X, ts, L: float | None = None, tol: float = 1e-9):
    """Descent lemma and the two one-step estimates at samples ``(x, t)``.

    For ``x+ = x - t grad f(x)`` with ``0 < t < 2/L``:

    * ``f(x+) <= f(x) + <g, x+ - x> + L/2 |x+ - x|^2``,
    * ``(1 - L t / 2) |x+ - x| |g| <= f(x) - f(x+)``,
    * ``|grad f(x+)| <= (L t + 1) |g|``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ts = np.broadcast_to(np.asarray(ts, dtype=float), (len(X),))
    if L is None:
        L = field.lipschitz(float(np.max(np.linalg.norm(X, axis=1))))
    g = field.grad(X)
    Xp = X - ts[:, None] * g
    f, fp = field.value(X), field.value(Xp)
    d = Xp - X
    nd, ng = np.linalg.norm(d, axis=1), np.linalg.norm(g, axis=1)
    m_dl = f + np.sum(g * d, axis=1) + 0.5 * L * nd ** 2 - fp
    m_i = f - fp - (1.0 - L * ts / 2.0) * nd * ng
    m_ii = (L * ts + 1.0) * ng - np.linalg.norm(field.grad(Xp), axis=1)
    margins = np.minimum(np.minimum(m_dl, m_i), m_ii)
    return verdict_from_margin("step_estimates", margins, tol, points=X, levels=ts,
                               extra={"L": L, "descent": float(m_dl.min()),
                                      "decrease": float(m_i.min()), "growth": float(m_ii.min())})


def hessian_bound(field, radius: float, n_r: int = 48, n_theta: int = 96, eps: float = 1e-6):
    """Largest spectral norm of a finite-difference Hessian on a polar grid."""
    rs = np.linspace(0.0, radius, n_r)
    th = 2 * math.pi * np.arange(n_theta) / n_theta
    P = (rs[:, None, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)[None]).reshape(-1, 2)
    e = np.eye(2) * eps
    cols = [(field.grad(P + e[i]) - field.grad(P - e[i])) / (2 * eps) for i in range(2)]
    H = np.stack(cols, axis=-1)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return float(np.max(np.abs(np.linalg.eigvalsh(H))))
