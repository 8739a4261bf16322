"""Resampling inference and Monte Carlo ground truth.

The bootstrap refits every nuisance inside every replicate: the estimator
argument is a closure over the full pipeline, not over fitted models. Each
replicate draws its resample and its fitting seed from a counter-derived
stream (`SeedSequence(seed, spawn_key=(i,))`), so results are reproducible
for a given seed and independent of how many worker threads run the
replicates.

Confidence intervals are order statistics of the replicate estimates, no
interpolation. The win-ratio summary interval is formed on the log scale and
exponentiated; since order statistics commute with monotone maps this equals
the percentile interval of the raw ratios, and it is the scale on which the
interval is conventionally justified.

`mc_oracle_truth` evaluates the target quantity itself: draw a large
synthetic population with both potential outcome columns, keep the stratum,
and average the contrast over cross pairs of distinct units. For the shipped
contrast families the all-pairs average has a closed form (rank counts,
category tables, or plain means), which removes pairing noise entirely; the
reported uncertainty is then the projection floor sqrt((var h1 + var h0)/m)
that no amount of re-pairing can reduce. Other contrasts fall back to
repeated shuffled pairings until the combined standard error clears the
target or a round cap is hit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    EstimandSpec,
    EstimateReport,
    StratumId,
    Summary,
    summarize_estimand,
)
from .errors import (
    EmptyStratum,
    PrincipalPairsError,
    TooManyFailedReplicates,
    ZeroLossProbability,
)
from .estimators import (
    PLUGIN_MODES,
    dml_estimate,
    make_kernel_context,
    plugin_estimate,
    tr_estimate,
)
from .nuisance import NuisanceSpec, fit_nuisance_bundle
from .simulation import DgpSpec, gen_dgp

__all__ = [
    "BootstrapResult",
    "bootstrap_ci",
    "summary_interval",
    "attach_bootstrap",
    "estimator_closure",
    "OracleTruth",
    "mc_oracle_truth",
]


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    """Replicate estimates (rows) with their SD and percentile interval."""

    replicates: np.ndarray  # (n_ok, dim)
    se: np.ndarray  # (dim,)
    ci: np.ndarray  # (dim, 2)
    level: float
    n_requested: int
    failures: list = field(default_factory=list)  # (replicate index, message)

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def _order_stat_ci(col: np.ndarray, level: float) -> tuple[float, float]:
    alpha = 1.0 - level
    lo = np.quantile(col, alpha / 2.0, method="lower")
    hi = np.quantile(col, 1.0 - alpha / 2.0, method="higher")
    return float(lo), float(hi)


def bootstrap_ci(
    data: Dataset,
    estimator_fn: Callable[[Dataset, int], np.ndarray],
    b: int,
    level: float = 0.95,
    rng_seed: int | None = None,
    max_failure_frac: float = 0.1,
    threads: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap of ``estimator_fn(resampled data, seed)``.

    The closure must refit its nuisances on the resample it receives. Failed
    replicates (any library error: separation, empty cell, near-zero
    denominator, ...) are recorded and excluded; more than ``max_failure_frac``
    of them is an error rather than a quietly shifted distribution.
    """
    if b < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level!r}")
    n = data.n

    def one(i: int):
        ss = np.random.SeedSequence(rng_seed, spawn_key=(i,))
        s_resample, s_fit = (int(v) for v in ss.generate_state(2))
        idx = np.random.default_rng(s_resample).integers(0, n, n)
        try:
            return np.asarray(estimator_fn(data.subset(idx), s_fit), dtype=float)
        except PrincipalPairsError as err:
            return (i, f"{type(err).__name__}: {err}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(b)))
    else:
        results = [one(i) for i in range(b)]

    reps = [r for r in results if isinstance(r, np.ndarray)]
    failures = [r for r in results if not isinstance(r, np.ndarray)]
    if len(failures) > max_failure_frac * b:
        raise TooManyFailedReplicates(len(failures), b)
    arr = np.stack(reps)
    se = arr.std(axis=0, ddof=1)
    ci = np.array([_order_stat_ci(arr[:, j], level) for j in range(arr.shape[1])])
    return BootstrapResult(arr, se, ci, level, b, failures)


def summary_interval(
    spec: EstimandSpec, replicates: np.ndarray, level: float
) -> tuple[float, tuple[float, float], int]:
    """SD and percentile interval of the summarized replicates.

    Returns (se, (lo, hi), n_dropped); ratio summaries drop replicates with a
    nonpositive loss component and work on the log scale.
    """
    arr = np.asarray(replicates, dtype=float)
    if spec.summary is Summary.RAW:
        vals = arr[:, 0]
    elif spec.summary is Summary.WIN_DIFFERENCE:
        vals = arr[:, 0] - arr[:, 1]
    else:
        keep = (arr[:, 1] > 0.0) & (arr[:, 0] > 0.0)
        if not np.any(keep):
            raise ZeroLossProbability(
                "no bootstrap replicate had positive win and loss components"
            )
        dropped = int(arr.shape[0] - keep.sum())
        logs = np.log(arr[keep, 0] / arr[keep, 1])
        lo, hi = _order_stat_ci(logs, level)
        vals = np.exp(logs)
        return float(vals.std(ddof=1)) if vals.size > 1 else 0.0, (
            math.exp(lo),
            math.exp(hi),
        ), dropped
    se = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return se, _order_stat_ci(vals, level), 0


def attach_bootstrap(report: EstimateReport, spec: EstimandSpec, boot: BootstrapResult) -> EstimateReport:
    """Fill a point report's inference fields from a bootstrap run."""
    report.se = boot.se
    report.ci = boot.ci
    report.summary_value = summarize_estimand(spec, report.point)
    s_se, s_ci, dropped = summary_interval(spec, boot.replicates, boot.level)
    report.summary_se = s_se
    report.summary_ci = s_ci
    report.meta["bootstrap"] = {
        "b": boot.n_requested,
        "level": boot.level,
        "n_failed": boot.n_failed,
        "n_dropped_summary": dropped,
    }
    return report


def estimator_closure(
    estimator: str,
    spec: EstimandSpec,
    nuisance: NuisanceSpec | None = None,
    k: int = 5,
    refold: bool = True,
    base_seed: int | None = None,
    strategy: str = "auto",
    threads: int = 1,
) -> Callable[[Dataset, int], np.ndarray]:
    """The full fit-then-estimate pipeline as a bootstrap-ready closure.

    For "dml", ``refold`` redraws the fold partition from each replicate's
    own seed (the default); with it off every replicate reuses the partition
    seeded by ``base_seed``.
    """
    nuisance = nuisance if nuisance is not None else NuisanceSpec()
    names = PLUGIN_MODES + ("tr", "dml")
    if estimator not in names:
        raise ValueError(f"estimator must be one of {names}, got {estimator!r}")

    def fn(data: Dataset, seed: int) -> np.ndarray:
        if estimator == "dml":
            rep = dml_estimate(
                data,
                spec,
                nuisance=nuisance,
                k=k,
                rng_seed=seed if refold else base_seed,
                delta=nuisance.delta,
                strategy=strategy,
                threads=threads,
            )
            return rep.point
        bundle = fit_nuisance_bundle(
            data, nuisance, spec.contrast, strata=(spec.stratum,), rng_seed=seed
        )
        ctx = make_kernel_context(
            data, bundle, spec.stratum, spec.contrast, nuisance.delta, validate=False
        )
        if estimator == "tr":
            return tr_estimate(data, ctx, strategy, threads).point
        return plugin_estimate(data, ctx, estimator, strategy, threads).point

    return fn


# ---------------------------------------------------------------------------
# Monte Carlo oracle truth


@dataclass
class OracleTruth:
    """The estimand's value in a large synthetic population."""

    value: np.ndarray  # (dim,)
    se: np.ndarray  # (dim,)
    n_stratum: int
    draws: int
    method: str  # "exact" or "paired"
    rounds: int = 0


def _exact_cross_mean(y1: np.ndarray, y0: np.ndarray, estimand: EstimandSpec, q: int | None):
    """All ordered cross-pair average excluding self pairs, and the
    projection variances, via closed forms. None when no closed form."""
    h = estimand.contrast
    m = y1.size
    pairs = m * (m - 1.0)
    if q is not None:
        hmat = h.category_matrix(q)  # (dim, q, q)
        c1 = np.bincount(y1.astype(int) - 1, minlength=q).astype(float)
        c0 = np.bincount(y0.astype(int) - 1, minlength=q).astype(float)
        tot = np.einsum("q,cqr,r->c", c1, hmat, c0)
        diag = hmat[:, y1.astype(int) - 1, y0.astype(int) - 1].sum(axis=1)
        value = (tot - diag) / pairs
        h1 = np.einsum("cqr,r->cq", hmat, c0 / m)[:, y1.astype(int) - 1]  # (dim, m)
        h0 = np.einsum("q,cqr->cr", c1 / m, hmat)[:, y0.astype(int) - 1]
        var = h1.var(axis=1) + h0.var(axis=1)
        return value, var
    name = h.name
    if name == "difference":
        value = np.array([(m * y1.sum() - m * y0.sum() - (y1 - y0).sum()) / pairs])
        var = np.array([y1.var() + y0.var()])
        return value, var
    if name in ("geq", "winpair"):
        s0 = np.sort(y0)
        s1 = np.sort(y1)
        le = np.searchsorted(s0, y1, side="right").astype(float)  # y0 <= y1_i counts
        lt = np.searchsorted(s0, y1, side="left").astype(float)
        ge_of0 = m - np.searchsorted(s1, y0, side="left").astype(float)  # y1 >= y0_j
        gt_of0 = m - np.searchsorted(s1, y0, side="right").astype(float)
        diag_ge = (y1 >= y0).astype(float).sum()
        diag_gt = (y1 > y0).astype(float).sum()
        diag_lt = (y1 < y0).astype(float).sum()
        if name == "geq":
            value = np.array([(le.sum() - diag_ge) / pairs])
            var = np.array([(le / m).var() + (ge_of0 / m).var()])
            return value, var
        wins = (lt.sum() - diag_gt) / pairs
        losses = ((m - le).sum() - diag_lt) / pairs
        var = np.array(
            [(lt / m).var() + (gt_of0 / m).var(), (1.0 - le / m).var() + (1.0 - ge_of0 / m).var()]
        )
        return np.array([wins, losses]), var
    return None


def mc_oracle_truth(
    dgp: DgpSpec,
    estimand: EstimandSpec,
    draws: int = 1_000_000,
    rng_seed: int | None = 0,
    target_se: float = 1e-3,
    max_rounds: int = 64,
) -> OracleTruth:
    """Simulate ``draws`` units, restrict to the estimand's stratum, and
    average the contrast between the z=1 potential outcome of one unit and
    the z=0 potential outcome of a distinct unit."""
    data, table = gen_dgp(dgp, draws, rng_seed)
    mask = table.stratum_mask(estimand.stratum)
    m = int(mask.sum())
    if m < 2:
        raise EmptyStratum(estimand.stratum.value)
    y1 = table.y1[mask]
    y0 = table.y0[mask]
    q = data.outcome_kind.q if data.outcome_kind.is_ordinal else None

    closed = _exact_cross_mean(y1, y0, estimand, q)
    if closed is not None:
        value, proj_var = closed
        se = np.sqrt(proj_var / m)
        return OracleTruth(value, se, m, draws, "exact")

    # generic contrast: repeated shuffled pairings, stopping when the pairing
    # noise on top of the projection floor clears the target
    h = estimand.contrast
    rng = np.random.default_rng(rng_seed)
    dim = h.dim
    round_means: list[np.ndarray] = []
    unit1 = np.zeros((dim, m))
    unit0 = np.zeros((dim, m))
    hits1 = np.zeros(m)
    hits0 = np.zeros(m)
    pos = np.arange(m)
    proj = np.full(dim, np.inf)
    for _t in range(max_rounds):
        perm = rng.permutation(m)
        keep = perm != pos
        i_idx = pos[keep]
        j_idx = perm[keep]
        vals = np.array(
            [h(float(a), float(b)) for a, b in zip(y1[i_idx], y0[j_idx])], dtype=float
        ).T  # (dim, kept)
        unit1[:, i_idx] += vals
        unit0[:, j_idx] += vals
        hits1[i_idx] += 1.0
        hits0[j_idx] += 1.0
        round_means.append(vals.mean(axis=1))
        if len(round_means) >= 2:
            h1bar = unit1 / np.maximum(hits1, 1.0)
            h0bar = unit0 / np.maximum(hits0, 1.0)
            proj = (h1bar.var(axis=1) + h0bar.var(axis=1)) / m
            rm = np.stack(round_means)
            between = rm.std(axis=0, ddof=1) / math.sqrt(rm.shape[0])
            if np.all(np.sqrt(proj + between**2) <= target_se):
                break
    rm = np.stack(round_means)
    value = rm.mean(axis=0)
    if rm.shape[0] > 1:
        between = rm.std(axis=0, ddof=1) / math.sqrt(rm.shape[0])
        se = np.sqrt(proj + between**2)
    else:
        se = np.full(dim, np.inf)
    return OracleTruth(value, se, m, draws, "paired", rounds=len(round_means))
