"""Verdict records shared by the check routines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"


@dataclass(frozen=True)
class CheckReport:
    """Outcome of a finite-sample check.

    ``witness`` holds the worst sample: a point ``x`` (or ``None``), a
    level ``r`` (or ``None``) and the margin, negative on failure.
    """

    name: str
    verdict: str
    witness_x: Optional[tuple]
    witness_r: Optional[float]
    margin: float
    tol: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        x = None if self.witness_x is None else [float(v) for v in self.witness_x]
        r = None if self.witness_r is None else float(self.witness_r)
        return {
            "name": self.name,
            "verdict": self.verdict,
            "witness": {"x": x, "r": r, "margin": float(self.margin)},
            "tol": float(self.tol),
        }


def verdict_from_margin(name, margins, tol, points=None, levels=None, extra=None):
    """PASS iff every margin is at least ``-tol``; witness is the worst sample."""
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return CheckReport(name, INCONCLUSIVE, None, None, float("nan"), tol, extra or {})
    i = int(np.argmin(margins))
    x = None if points is None else tuple(np.asarray(points[i], dtype=float))
    r = None if levels is None else float(levels[i])
    verdict = PASS if margins[i] >= -tol else FAIL
    return CheckReport(name, verdict, x, r, float(margins[i]), tol, dict(extra or {}, index=i))
