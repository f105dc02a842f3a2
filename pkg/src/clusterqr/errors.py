"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`ClusterQRError`.  The CLI maps the three families below onto exit
codes: input problems (2), solver failures (3) and singular weight
matrices (4).
"""

from __future__ import annotations


class ClusterQRError(Exception):
    """Base class for all package errors."""


class InputError(ClusterQRError, ValueError):
    """Invalid data or arguments."""


class SolverError(ClusterQRError, RuntimeError):
    """An optimization problem could not be solved."""


class MissingColumn(InputError):
    def __init__(self, column: str):
        super().__init__(f"column {column!r} not found in input")
        self.column = column


class NonNumericCell(InputError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a finite number")
        self.row = row
        self.column = column
        self.value = value


class EmptyDataset(InputError):
    pass


class RankDeficientDesign(InputError):
    pass


class DegenerateVariance(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class InsufficientDraws(InputError):
    pass


class NegativeVariance(InputError):
    pass


class EmptyWindow(InputError):
    """No residual fell inside the kernel window of the Powell estimator."""


class SolverDidNotConverge(SolverError):
    def __init__(self, iterations: int, tau: float | None = None, replication: int | None = None):
        where = []
        if replication is not None:
            where.append(f"replication {replication}")
        if tau is not None:
            where.append(f"tau={tau:g}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"interior point solver stopped after {iterations} iterations{suffix}")
        self.iterations = iterations
        self.tau = tau
        self.replication = replication


class PseudoObservationBinding(SolverError):
    def __init__(self, tau: float, replication: int | None = None):
        rep = f", replication {replication}" if replication is not None else ""
        super().__init__(
            f"pseudo-observation residual not positive at tau={tau:g}{rep} even after doubling y*"
        )
        self.tau = tau
        self.replication = replication


class SingularJacobian(SolverError):
    pass


class NearSingularWeight(ClusterQRError, ValueError):
    def __init__(self, tau: float | None = None, detail: str = ""):
        at = f" at tau={tau:g}" if tau is not None else ""
        super().__init__(f"weight matrix is numerically singular{at}{': ' + detail if detail else ''}")
        self.tau = tau
