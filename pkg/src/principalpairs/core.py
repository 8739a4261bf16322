"""Domain types shared by every estimator: observations, datasets,
contrast functions, estimand specifications, and estimate reports.

Outcomes may be undefined (truncation by death). An undefined outcome is an
explicit ``None`` at the observation level and is tracked with a mask inside
:class:`Dataset`; estimator code only ever gathers outcome values for rows
whose pair weight is structurally nonzero, so undefined outcomes never enter
arithmetic.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidBinary,
    InvalidOrdinalOutcome,
    ConfigError,
    UndefinedOutcome,
    UndefinedOutcomeWithD1,
    ZeroLossProbability,
)

__all__ = [
    "Observation",
    "OutcomeKind",
    "Dataset",
    "StratumId",
    "ContrastFunction",
    "DIFFERENCE",
    "GEQ_INDICATOR",
    "WIN_PAIR",
    "BUILTIN_CONTRASTS",
    "contrast_by_name",
    "component_names",
    "Summary",
    "EstimandSpec",
    "EstimateReport",
    "validate_dataset",
    "eval_contrast",
    "summarize_estimand",
    "read_csv_dataset",
]


# ---------------------------------------------------------------------------
# observations and datasets


@dataclass(frozen=True)
class Observation:
    """One unit's record: covariates, assignment, intermediate, outcome.

    ``y is None`` encodes an undefined outcome (only meaningful with d=0).
    """

    x: tuple[float, ...]
    z: int
    d: int
    y: float | None


@dataclass(frozen=True)
class OutcomeKind:
    """Outcome scale: continuous, or ordinal with categories 1..q."""

    kind: str  # "continuous" | "ordinal"
    q: int | None = None

    @staticmethod
    def continuous() -> "OutcomeKind":
        return OutcomeKind("continuous")

    @staticmethod
    def ordinal(q: int) -> "OutcomeKind":
        if q < 2:
            raise ValueError("ordinal outcome needs q >= 2 categories")
        return OutcomeKind("ordinal", q)

    @property
    def is_ordinal(self) -> bool:
        return self.kind == "ordinal"


class Dataset:
    """Immutable column store for a sample of observations.

    Arrays are the source of truth; ``y`` holds NaN where the outcome is
    undefined and ``y_defined`` is the companion mask.
    """

    __slots__ = ("x", "z", "d", "y", "y_defined", "outcome_kind")

    def __init__(
        self,
        x: np.ndarray,
        z: np.ndarray,
        d: np.ndarray,
        y: np.ndarray,
        outcome_kind: OutcomeKind | None = None,
    ) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.asarray(z)
        d = np.asarray(d)
        y = np.asarray(y, dtype=float)
        if not (x.shape[0] == z.shape[0] == d.shape[0] == y.shape[0]):
            raise ValueError("x, z, d, y must have the same number of rows")
        self.x = x
        self.z = z
        self.d = d
        self.y = y
        self.y_defined = ~np.isnan(y)
        self.outcome_kind = outcome_kind or OutcomeKind.continuous()
        for arr in (self.x, self.z, self.d, self.y, self.y_defined):
            arr.setflags(write=False)

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_observations(
        observations: Sequence[Observation], outcome_kind: OutcomeKind | None = None
    ) -> "Dataset":
        if len(observations) == 0:
            raise EmptyDataset("cannot build a dataset from zero observations")
        p = len(observations[0].x)
        for i, o in enumerate(observations):
            if len(o.x) != p:
                raise DimensionMismatch(i, p, len(o.x))
        x = np.array([o.x for o in observations], dtype=float)
        z = np.array([o.z for o in observations])
        d = np.array([o.d for o in observations])
        y = np.array([math.nan if o.y is None else float(o.y) for o in observations])
        return Dataset(x, z, d, y, outcome_kind)

    # -- accessors ----------------------------------------------------------

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def observation(self, i: int) -> Observation:
        y = float(self.y[i]) if self.y_defined[i] else None
        return Observation(tuple(self.x[i]), int(self.z[i]), int(self.d[i]), y)

    @property
    def observations(self) -> list[Observation]:
        return [self.observation(i) for i in range(self.n)]

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations)

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Row selection (used by bootstrap resampling); indices may repeat."""
        idx = np.asarray(indices)
        return Dataset(self.x[idx], self.z[idx], self.d[idx], self.y[idx], self.outcome_kind)


def validate_dataset(data: Dataset) -> Dataset:
    """Check observation invariants; return the dataset unchanged if valid.

    Reports the index and reason of the first violating row.
    """
    if data.n == 0:
        raise EmptyDataset("dataset has no rows")
    z = np.asarray(data.z)
    d = np.asarray(data.d)
    bad_z = ~np.isin(z, (0, 1))
    bad_d = ~np.isin(d, (0, 1))
    undef_d1 = ~data.y_defined & (d == 1)
    any_bad = bad_z | bad_d | undef_d1
    if np.any(any_bad):
        i = int(np.argmax(any_bad))
        if bad_z[i]:
            raise InvalidBinary(i, "z", z[i])
        if bad_d[i]:
            raise InvalidBinary(i, "d", d[i])
        raise UndefinedOutcomeWithD1(i)
    if data.outcome_kind.is_ordinal:
        q = data.outcome_kind.q
        yv = data.y[data.y_defined]
        rows = np.flatnonzero(data.y_defined)
        bad = (yv != np.round(yv)) | (yv < 1) | (yv > q)
        if np.any(bad):
            i = int(rows[np.argmax(bad)])
            raise InvalidOrdinalOutcome(i, data.y[i], q)
    return data


# ---------------------------------------------------------------------------
# strata


class StratumId(enum.Enum):
    """Principal stratum label (d-under-treatment, d-under-control)."""

    S10 = "10"
    S00 = "00"
    S11 = "11"
    S01 = "01"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


# ---------------------------------------------------------------------------
# contrast functions


@dataclass(frozen=True)
class ContrastFunction:
    """A possibly vector-valued comparison ``h(u, v)`` of two outcomes.

    ``pair_matrix(u, v)`` evaluates all cross pairs of two outcome vectors at
    once, returning an array of shape ``(dim, len(u), len(v))``; estimator
    internals rely on it. ``category_matrix(q)`` tabulates ``h`` over the
    ordinal grid 1..q as a ``(dim, q, q)`` array, which is how pairwise means
    for ordinal outcomes support arbitrary contrasts.
    """

    name: str
    dim: int
    _eval: Callable[[float, float], tuple[float, ...]]
    _pair_matrix: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, u: float, v: float) -> tuple[float, ...]:
        return self._eval(u, v)

    def pair_matrix(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = self._pair_matrix(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
        return np.asarray(out, dtype=float)

    def category_matrix(self, q: int) -> np.ndarray:
        cats = np.arange(1, q + 1, dtype=float)
        return self.pair_matrix(cats, cats)

    @staticmethod
    def from_category_matrix(name: str, matrix: np.ndarray) -> "ContrastFunction":
        """Build an ordinal-only contrast from an explicit (dim, q, q) table."""
        m = np.asarray(matrix, dtype=float)
        if m.ndim == 2:
            m = m[None, :, :]
        dim = m.shape[0]

        def ev(u: float, v: float) -> tuple[float, ...]:
            return tuple(m[:, int(u) - 1, int(v) - 1])

        def pm(u: np.ndarray, v: np.ndarray) -> np.ndarray:
            iu = np.asarray(u, dtype=int) - 1
            iv = np.asarray(v, dtype=int) - 1
            return m[:, iu[:, None], iv[None, :]]

        return ContrastFunction(name, dim, ev, pm)


def _diff_pm(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (u[:, None] - v[None, :])[None, :, :]


def _geq_pm(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (u[:, None] >= v[None, :]).astype(float)[None, :, :]


def _winpair_pm(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    win = (u[:, None] > v[None, :]).astype(float)
    loss = (u[:, None] < v[None, :]).astype(float)
    return np.stack([win, loss])


DIFFERENCE = ContrastFunction("difference", 1, lambda u, v: (u - v,), _diff_pm)
GEQ_INDICATOR = ContrastFunction("geq", 1, lambda u, v: (float(u >= v),), _geq_pm)
WIN_PAIR = ContrastFunction(
    "winpair", 2, lambda u, v: (float(u > v), float(u < v)), _winpair_pm
)

BUILTIN_CONTRASTS = {
    "difference": DIFFERENCE,
    "geq": GEQ_INDICATOR,
    "winpair": WIN_PAIR,
}


def contrast_by_name(name: str) -> ContrastFunction:
    try:
        return BUILTIN_CONTRASTS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_CONTRASTS))
        raise ConfigError(f"unknown contrast {name!r} (known: {known})") from None


def component_names(h: ContrastFunction) -> tuple[str, ...]:
    """Labels for the components of a contrast's value vector."""
    if h.name == "winpair" and h.dim == 2:
        return ("win", "loss")
    if h.dim == 1:
        return (h.name,)
    return tuple(f"{h.name}[{i}]" for i in range(h.dim))


def eval_contrast(h: ContrastFunction, u: float | None, v: float | None) -> np.ndarray:
    """Evaluate ``h(u, v)``; undefined arguments are an error, not a NaN."""
    for name, val in (("first", u), ("second", v)):
        if val is None or (isinstance(val, float) and math.isnan(val)):
            raise UndefinedOutcome(f"{name} outcome is undefined")
    return np.asarray(h(float(u), float(v)), dtype=float)


# ---------------------------------------------------------------------------
# estimand specification and reports


class Summary(enum.Enum):
    RAW = "raw"
    WIN_RATIO = "win_ratio"
    WIN_DIFFERENCE = "win_difference"


@dataclass(frozen=True)
class EstimandSpec:
    """Stratum, contrast, and how to collapse a vector contrast to a scalar."""

    stratum: StratumId
    contrast: ContrastFunction
    summary: Summary = Summary.RAW

    def __post_init__(self) -> None:
        if self.summary in (Summary.WIN_RATIO, Summary.WIN_DIFFERENCE) and self.contrast.dim != 2:
            raise ValueError(f"{self.summary.value} summary requires a 2-dimensional contrast")


def summarize_estimand(spec: EstimandSpec, point: np.ndarray) -> float:
    """Collapse the per-component point estimate per ``spec.summary``."""
    point = np.asarray(point, dtype=float)
    if point.shape != (spec.contrast.dim,):
        raise ValueError(f"point has shape {point.shape}, expected ({spec.contrast.dim},)")
    if spec.summary is Summary.RAW:
        return float(point[0])
    if spec.summary is Summary.WIN_DIFFERENCE:
        return float(point[0] - point[1])
    if point[1] <= 0:
        raise ZeroLossProbability(f"loss probability {point[1]:g} is not positive")
    return float(point[0] / point[1])


@dataclass
class EstimateReport:
    """Point estimate plus its numerator/denominator split and inference.

    ``point = numerator / denominator`` componentwise; ``denominator`` is the
    squared estimated stratum proportion.
    """

    point: np.ndarray
    numerator: np.ndarray
    denominator: float
    summary_value: float | None = None
    se: np.ndarray | None = None
    ci: np.ndarray | None = None  # shape (dim, 2)
    summary_se: float | None = None
    summary_ci: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# CSV ingestion


def read_csv_dataset(path: str, outcome_kind: OutcomeKind | None = None) -> Dataset:
    """Load a dataset from CSV with columns ``x1..xp``, ``z``, ``d``, ``y``.

    A blank ``y`` field encodes an undefined outcome. Column order is free;
    names are matched case-insensitively from the header row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        rows = [row for row in reader if row]

    cols = {name.strip().lower(): i for i, name in enumerate(header)}
    for required in ("z", "d", "y"):
        if required not in cols:
            raise ConfigError(f"{path}: missing required column {required!r}")
    xnames = []
    k = 1
    while f"x{k}" in cols:
        xnames.append(f"x{k}")
        k += 1
    if not xnames:
        raise ConfigError(f"{path}: no covariate columns x1..xp found")
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    def parse_cell(row: list[str], col: str, rownum: int) -> float:
        try:
            return float(row[cols[col]])
        except (ValueError, IndexError):
            raise ConfigError(f"{path}: row {rownum}: cannot parse column {col!r}") from None

    n = len(rows)
    x = np.empty((n, len(xnames)))
    z = np.empty(n, dtype=int)
    d = np.empty(n, dtype=int)
    y = np.empty(n)
    for i, row in enumerate(rows):
        for j, cn in enumerate(xnames):
            x[i, j] = parse_cell(row, cn, i)
        z[i] = int(parse_cell(row, "z", i))
        d[i] = int(parse_cell(row, "d", i))
        ystr = row[cols["y"]].strip() if cols["y"] < len(row) else ""
        y[i] = math.nan if ystr == "" else parse_cell(row, "y", i)
    return Dataset(x, z, d, y, outcome_kind)
