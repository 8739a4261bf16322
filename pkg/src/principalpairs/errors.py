"""Exception hierarchy shared by all modules.

Every error raised on purpose by this package derives from
:class:`PrincipalPairsError`, so callers (and the CLI) can distinguish
domain failures from plain bugs.
"""

from __future__ import annotations


class PrincipalPairsError(Exception):
    """Base class for all errors raised by principalpairs."""


# ---------------------------------------------------------------------------
# dataset / contrast errors


class EmptyDataset(PrincipalPairsError):
    pass


class InvalidBinary(PrincipalPairsError):
    """z or d outside {0, 1}; carries the offending row index."""

    def __init__(self, row: int, field: str, value) -> None:
        self.row = row
        self.field = field
        self.value = value
        super().__init__(f"row {row}: {field}={value!r} is not in {{0, 1}}")


class UndefinedOutcomeWithD1(PrincipalPairsError):
    """y is undefined although d=1 (undefined outcomes require d=0)."""

    def __init__(self, row: int) -> None:
        self.row = row
        super().__init__(f"row {row}: y is undefined but d=1")


class DimensionMismatch(PrincipalPairsError):
    def __init__(self, row: int, expected: int, got: int) -> None:
        self.row = row
        super().__init__(f"row {row}: covariate vector has length {got}, expected {expected}")


class InvalidOrdinalOutcome(PrincipalPairsError):
    """Ordinal y outside the integer range 1..Q."""

    def __init__(self, row: int, value, q: int) -> None:
        self.row = row
        super().__init__(f"row {row}: ordinal outcome {value!r} not an integer in 1..{q}")


class UndefinedOutcome(PrincipalPairsError):
    """A contrast was evaluated on an undefined outcome."""


class ZeroLossProbability(PrincipalPairsError):
    """Win-ratio summary requested with a nonpositive loss component."""


class UnsupportedContrast(PrincipalPairsError):
    """The requested pairwise-mean composition does not support this contrast."""


# ---------------------------------------------------------------------------
# nuisance fitting errors


class SeparationDetected(PrincipalPairsError):
    """Logistic coefficients diverged (perfect separation)."""


class SingularInformation(PrincipalPairsError):
    """Information matrix is singular during a Newton step."""


class NoConvergence(PrincipalPairsError):
    def __init__(self, what: str, iterations: int) -> None:
        super().__init__(f"{what} did not converge within {iterations} iterations")


class RankDeficientDesign(PrincipalPairsError):
    pass


class MissingCategory(PrincipalPairsError):
    def __init__(self, missing: list[int], q: int) -> None:
        self.missing = missing
        super().__init__(f"categories {missing} absent from training data (expected 1..{q})")


class NonmonotoneCutpoints(PrincipalPairsError):
    """Fitted cumulative cutpoints are not strictly increasing (should be
    impossible under the internal reparameterization; raised defensively)."""


class NonpositiveSigma(PrincipalPairsError):
    pass


class NotAProbabilityVector(PrincipalPairsError):
    pass


class EmptyCell(PrincipalPairsError):
    def __init__(self, z: int, d: int) -> None:
        self.z = z
        self.d = d
        super().__init__(f"observed cell (z={z}, d={d}) has no rows with a defined outcome")


class UnknownLearnerKind(PrincipalPairsError):
    def __init__(self, kind: str, known: list[str]) -> None:
        super().__init__(f"unknown learner kind {kind!r}; registered kinds: {sorted(known)}")


# ---------------------------------------------------------------------------
# estimator errors


class DenominatorNearZero(PrincipalPairsError):
    def __init__(self, stratum: str, value: float) -> None:
        self.stratum = stratum
        self.value = value
        super().__init__(
            f"stratum {stratum}: estimated stratum proportion {value:.3e} is below 1e-06, "
            "the estimand is empirically undefined on these data"
        )


class BadK(PrincipalPairsError):
    def __init__(self, n: int, k: int) -> None:
        super().__init__(f"K={k} invalid for n={n}; need 2 <= K <= n/2")


class StratumNotAllowed(PrincipalPairsError):
    """Stratum 01 requested outside sensitivity-analysis mode."""


# ---------------------------------------------------------------------------
# sensitivity errors


class EtaInfeasible(PrincipalPairsError):
    def __init__(self, eta: float, bound: float) -> None:
        super().__init__(f"eta={eta:g} outside the feasible range [0, {bound:g}]")


class EtaIsOne(PrincipalPairsError):
    def __init__(self) -> None:
        super().__init__("eta=1 is the identifiability boundary; principal scores are undefined there")


class EtaInfeasibleAtSomeX(PrincipalPairsError):
    def __init__(self, eta0: float, frac_violating: float, bound_quantile: float) -> None:
        self.eta0 = eta0
        self.frac_violating = frac_violating
        super().__init__(
            f"eta0={eta0:g} infeasible for {frac_violating:.1%} of units; "
            f"the feasibility bound falls below eta0 from its {1 - frac_violating:.3f} quantile "
            f"(value {bound_quantile:.4f}) downward"
        )


# ---------------------------------------------------------------------------
# inference / simulation errors


class TooManyFailedReplicates(PrincipalPairsError):
    def __init__(self, failed: int, total: int) -> None:
        self.failed = failed
        super().__init__(f"{failed} of {total} bootstrap replicates failed (more than 10%)")


class EmptyStratum(PrincipalPairsError):
    def __init__(self, stratum: str) -> None:
        super().__init__(f"no simulated unit fell in stratum {stratum}")


class SingularTransform(PrincipalPairsError):
    def __init__(self) -> None:
        super().__init__("covariate transform undefined: |1 + x1| < 1e-08")


class ConfigError(PrincipalPairsError):
    """Malformed run configuration (CLI)."""
