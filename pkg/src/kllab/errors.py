"""Exception hierarchy.

Every error carries a stable ``code`` string so that the command line
front end and the JSON reports can refer to failures without depending
on class names.
"""


class KLError(Exception):
    """Base class for all library errors."""

    code = "ERROR"

    def __init__(self, message="", **details):
        super().__init__(message or self.code)
        self.details = details


class OutOfDomain(KLError):
    code = "OUT_OF_DOMAIN"


class Stalled(KLError):
    code = "STALLED"


class Overlap(KLError):
    """Two segments of a piecewise curve share more than one value."""

    code = "OVERLAP"

    def __init__(self, i, j, message=""):
        super().__init__(message or f"segments {i} and {j} overlap in value", pair=(i, j))
        self.pair = (i, j)


class RangeError(KLError):
    code = "RANGE"


class Degenerate(KLError):
    code = "DEGENERATE"


class UndefinedAtMin(KLError):
    code = "UNDEFINED_AT_MIN"


class NotStarShaped(KLError):
    code = "NOT_STAR_SHAPED"


class CriticalValue(KLError):
    code = "CRITICAL_VALUE"


class DivergentTail(KLError):
    """Raised by :func:`kllab.analysis.build_phi` for non-integrable tails.

    The partially built profile, with ``phi`` measured relative to the
    smallest grid level, is attached as ``profile``.
    """

    code = "DIVERGENT_TAIL"

    def __init__(self, message="", profile=None):
        super().__init__(message)
        self.profile = profile


class Divergent(KLError):
    code = "DIVERGENT"


class EmptyValley(KLError):
    code = "EMPTY_VALLEY"


class StepTooLarge(KLError):
    code = "STEP_TOO_LARGE"


class NoConvergence(KLError):
    code = "NO_CONVERGENCE"


class CertFail(KLError):
    code = "CERT_FAIL"

    def __init__(self, message="", index=None, run=None):
        super().__init__(message, index=index)
        self.index = index
        self.run = run


class DescentViolation(KLError):
    code = "DESCENT_VIOLATION"

    def __init__(self, message="", index=None, run=None):
        super().__init__(message, index=index)
        self.index = index
        self.run = run

