"""Point estimators for stratum-specific pairwise contrasts.

The family, per stratum: the doubly robust intermediate-probability estimator
(psi scores), three plug-in U-statistics indexed by which nuisance pair they
use, the triply robust scaled U-statistic built on the influence-function pair
kernel, and its cross-fitted variant over a partition of index pairs.

Each stratum is realized by one observed cell per assignment arm with an
extraction ratio (stratum score over cell probability), a per-unit score whose
mean estimates the stratum proportion, and a pairwise outcome mean between the
two cells:

  stratum  treated cell  control cell  unit score
  10       (z=1, d=1)    (z=0, d=0)    psi_1 - psi_0
  00       (z=1, d=0)    (z=0, d=0)    1 - psi_1
  11       (z=1, d=1)    (z=0, d=1)    psi_0

Pair sums share one engine; the triply robust and cross-fitted numerators use
its ordered-pair form (the symmetrized kernel halves cancel), the plug-ins its
literal unordered i<j form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._pairsum import BlockStructure, MuGauss, MuOrdinal, PairSumEngine
from .core import (
    ContrastFunction,
    Dataset,
    EstimandSpec,
    EstimateReport,
    Observation,
    StratumId,
    eval_contrast,
    validate_dataset,
)
from .errors import BadK, ConfigError, DenominatorNearZero, StratumNotAllowed, UndefinedOutcome
from .nuisance import (
    STRATUM_CELLS,
    NuisanceBundle,
    NuisanceSpec,
    NuisanceSubset,
    PrincipalScores,
    fit_nuisance_bundle,
    predict_principal_scores,
)

__all__ = [
    "DENOMINATOR_GUARD",
    "psi_dz",
    "psi_dz_values",
    "estimate_pz_dr",
    "KernelContext",
    "make_kernel_context",
    "plugin_estimate",
    "kernel_g",
    "tr_estimate",
    "PairPartition",
    "partition_pairs",
    "dml_estimate",
    "PLUGIN_MODES",
]

DENOMINATOR_GUARD = 1e-6
PLUGIN_MODES = ("pi_p", "pi_mu", "p_mu")


# ---------------------------------------------------------------------------
# doubly robust intermediate probability


def psi_dz_values(data: Dataset, sub: NuisanceSubset, z: int) -> np.ndarray:
    """Per-unit augmented scores: 1(Z=z){D - p_z(X)}/P(Z=z|X) + p_z(X)."""
    pz = sub.intermediate.predict_p(z, data.x)
    pi = sub.propensity.predict(data.x)
    arm = pi if z == 1 else 1.0 - pi
    at_z = np.asarray(data.z) == z
    return np.where(at_z, (np.asarray(data.d, dtype=float) - pz) / arm, 0.0) + pz


def psi_dz(o: Observation, sub: NuisanceSubset, z: int) -> float:
    x = np.asarray(o.x, dtype=float)[None, :]
    pz = float(sub.intermediate.predict_p(z, x)[0])
    pi = float(sub.propensity.predict(x)[0])
    arm = pi if z == 1 else 1.0 - pi
    if o.z == z:
        return (o.d - pz) / arm + pz
    return pz


def estimate_pz_dr(data: Dataset, sub: NuisanceSubset, z: int) -> float:
    """p_hat_z: the empirical mean of the augmented per-unit scores."""
    return float(np.sum(psi_dz_values(data, sub, z)) / data.n)


# ---------------------------------------------------------------------------
# kernel context: everything unit-level an estimator needs, precomputed


def _unit_score(stratum: StratumId, psi1: np.ndarray, psi0: np.ndarray) -> np.ndarray:
    if stratum is StratumId.S10:
        return psi1 - psi0
    if stratum is StratumId.S00:
        return 1.0 - psi1
    if stratum is StratumId.S11:
        return psi0
    raise StratumNotAllowed(
        "stratum 01 has no estimator under monotonicity; use the sensitivity interface"
    )


def _cell_prob(z: int, d: int, pi, p1, p0):
    arm = pi if z == 1 else 1.0 - pi
    pz = p1 if z == 1 else p0
    return arm, pz if d == 1 else 1.0 - pz


@dataclass
class KernelContext:
    """Per-dataset evaluation state for one stratum and contrast.

    Holds the fitted bundle's unit-level predictions, the two observed cells'
    row sets, the role weights (zero off-cell), the per-unit stratum score,
    and the estimated stratum proportion ``ehat`` (mean of the score).
    """

    data: Dataset
    stratum: StratumId
    contrast: ContrastFunction
    bundle: NuisanceBundle
    pi: np.ndarray
    p1: np.ndarray
    p0: np.ndarray
    scores: PrincipalScores
    stratum_score: np.ndarray  # e_s(X) per unit, floored and renormalized
    psi1: np.ndarray
    psi0: np.ndarray
    p1_hat: float
    p0_hat: float
    t_cell: tuple[int, int]
    c_cell: tuple[int, int]
    rows_t: np.ndarray
    rows_c: np.ndarray
    wt: np.ndarray
    wc: np.ndarray
    cvec: np.ndarray
    ehat: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.data.n

    def require_defined_outcomes(self) -> None:
        """Outcome-touching terms may only see defined outcomes in the two
        role cells; other rows never reach the contrast."""
        for rows, cell in ((self.rows_t, self.t_cell), (self.rows_c, self.c_cell)):
            if rows.size and not np.all(self.data.y_defined[rows]):
                raise UndefinedOutcome(
                    f"cell (z={cell[0]}, d={cell[1]}) has undefined outcomes; "
                    f"stratum {self.stratum.value} needs them"
                )

    def check_denominator(self) -> None:
        if abs(self.ehat) < DENOMINATOR_GUARD:
            raise DenominatorNearZero(self.stratum.value, self.ehat)

    def mu_parts(self, bundles: list[NuisanceBundle] | None = None):
        """Pairwise-mean inputs for the engine: per-block unit-level values
        under the treated-cell (row role) and control-cell (column role)
        models. With no argument, the context's own bundle as a single block."""
        bundles = bundles if bundles is not None else [self.bundle]
        x = self.data.x
        zt, dt = self.t_cell
        zc, dc = self.c_cell
        rows = [b.pairwise_mean.cell_values(zt, dt, x) for b in bundles]
        cols = [b.pairwise_mean.cell_values(zc, dc, x) for b in bundles]
        if self.data.outcome_kind.is_ordinal:
            q = self.data.outcome_kind.q
            return MuOrdinal(np.stack(rows), np.stack(cols), self.contrast.category_matrix(q))
        return MuGauss(
            np.stack(rows),
            np.stack(cols),
            np.array([b.pairwise_mean.sigma for b in bundles], dtype=float),
            self.contrast.name,
        )

    def engine(self, structure: BlockStructure | None = None, strategy: str = "auto", threads: int = 1) -> PairSumEngine:
        q = self.data.outcome_kind.q if self.data.outcome_kind.is_ordinal else None
        return PairSumEngine(self.data.y, self.contrast, structure, q, strategy, threads)


def make_kernel_context(
    data: Dataset,
    bundle: NuisanceBundle,
    stratum: StratumId,
    contrast: ContrastFunction,
    delta: float = 0.0,
    validate: bool = True,
) -> KernelContext:
    """Evaluate the bundle on ``data`` and assemble all per-unit pieces."""
    if validate:
        validate_dataset(data)
    if stratum is StratumId.S01:
        raise StratumNotAllowed(
            "stratum 01 has no estimator under monotonicity; use the sensitivity interface"
        )
    x = data.x
    z, d = np.asarray(data.z), np.asarray(data.d)
    pi = bundle.propensity.predict(x)
    p1 = bundle.intermediate.predict_p(1, x)
    p0 = bundle.intermediate.predict_p(0, x)
    scores = predict_principal_scores(bundle.intermediate, x, delta)
    e_s = scores.for_stratum(stratum)
    psi1 = psi_dz_values(data, bundle.subset, 1)
    psi0 = psi_dz_values(data, bundle.subset, 0)
    cvec = _unit_score(stratum, psi1, psi0)
    t_cell, c_cell = STRATUM_CELLS[stratum]
    rows_t = np.flatnonzero((z == t_cell[0]) & (d == t_cell[1]))
    rows_c = np.flatnonzero((z == c_cell[0]) & (d == c_cell[1]))
    wt = np.zeros(data.n)
    arm_t, ip_t = _cell_prob(*t_cell, pi, p1, p0)
    wt[rows_t] = e_s[rows_t] / (arm_t[rows_t] * ip_t[rows_t])
    wc = np.zeros(data.n)
    arm_c, ip_c = _cell_prob(*c_cell, pi, p1, p0)
    wc[rows_c] = e_s[rows_c] / (arm_c[rows_c] * ip_c[rows_c])
    return KernelContext(
        data=data,
        stratum=stratum,
        contrast=contrast,
        bundle=bundle,
        pi=pi,
        p1=p1,
        p0=p0,
        scores=scores,
        stratum_score=e_s,
        psi1=psi1,
        psi0=psi0,
        p1_hat=float(np.sum(psi1) / data.n),
        p0_hat=float(np.sum(psi0) / data.n),
        t_cell=t_cell,
        c_cell=c_cell,
        rows_t=rows_t,
        rows_c=rows_c,
        wt=wt,
        wc=wc,
        cvec=cvec,
        ehat=float(np.sum(cvec) / data.n),
        meta={"delta": delta, "n_floored": scores.n_floored},
    )


# ---------------------------------------------------------------------------
# plug-in estimators


def _m2_score(ctx: KernelContext) -> np.ndarray:
    """Per-unit inverse-probability score whose conditional mean is the
    stratum score: replaces both roles' weights in the pi+mu plug-in."""
    z = np.asarray(ctx.data.z, dtype=float)
    d = np.asarray(ctx.data.d, dtype=float)
    if ctx.stratum is StratumId.S10:
        return d * z / ctx.pi - d * (1.0 - z) / (1.0 - ctx.pi)
    if ctx.stratum is StratumId.S00:
        return (1.0 - d) * z / ctx.pi
    return d * (1.0 - z) / (1.0 - ctx.pi)  # S11


def plugin_estimate(
    data: Dataset,
    ctx: KernelContext,
    mode: str,
    strategy: str = "auto",
    threads: int = 1,
) -> EstimateReport:
    """One of the three plug-in U-statistics, as a literal unordered-pair
    average: C(n,2)^{-1} sum_{i<j} f(O_i, O_j) with the role-asymmetric f.

      pi_p:  inverse-probability weights on both cells times the observed
             contrast (needs propensity and intermediate models)
      pi_mu: inverse-probability stratum scores times the pairwise mean
      p_mu:  model-based stratum scores times the pairwise mean
    """
    if mode not in PLUGIN_MODES:
        raise ValueError(f"mode must be one of {PLUGIN_MODES}, got {mode!r}")
    ctx.check_denominator()
    n = ctx.n
    if n < 2:
        raise ValueError("need at least two rows for a pair estimator")
    eng = ctx.engine(None, strategy, threads)
    if mode == "pi_p":
        ctx.require_defined_outcomes()
        num = eng.h_sum(ctx.rows_t, ctx.rows_c, ctx.wt, ctx.wc, triangular=True)
    else:
        if mode == "pi_mu":
            a = _m2_score(ctx)
        else:
            a = ctx.stratum_score
        rows = np.flatnonzero(a != 0.0)
        num = eng.mu_sum(rows, rows, a, a, ctx.mu_parts(), triangular=True)
    pairs = n * (n - 1) / 2.0
    numerator = num / pairs
    denom = ctx.ehat**2
    return EstimateReport(
        point=numerator / denom,
        numerator=numerator,
        denominator=denom,
        meta={
            "estimator": mode,
            "stratum": ctx.stratum.value,
            "n": n,
            "ehat": ctx.ehat,
            "p1_hat": ctx.p1_hat,
            "p0_hat": ctx.p0_hat,
        },
    )


# ---------------------------------------------------------------------------
# influence-function pair kernel and the triply robust estimator


def _obs_unit_values(ctx: KernelContext, o: Observation):
    """Role weights and unit score for a single observation under the
    context's fitted models (mirrors the vectorized construction)."""
    x = np.asarray(o.x, dtype=float)[None, :]
    pi = ctx.bundle.propensity.predict(x)
    p1 = ctx.bundle.intermediate.predict_p(1, x)
    p0 = ctx.bundle.intermediate.predict_p(0, x)
    e_s = predict_principal_scores(ctx.bundle.intermediate, x, ctx.meta.get("delta", 0.0)).for_stratum(
        ctx.stratum
    )
    wt = wc = 0.0
    if (o.z, o.d) == ctx.t_cell:
        arm, ip = _cell_prob(*ctx.t_cell, pi, p1, p0)
        wt = float(e_s[0] / (arm[0] * ip[0]))
    if (o.z, o.d) == ctx.c_cell:
        arm, ip = _cell_prob(*ctx.c_cell, pi, p1, p0)
        wc = float(e_s[0] / (arm[0] * ip[0]))
    sub = ctx.bundle.subset
    c = float(_unit_score(ctx.stratum, np.array([psi_dz(o, sub, 1)]), np.array([psi_dz(o, sub, 0)]))[0])
    return wt, wc, c


def kernel_g(oi: Observation, oj: Observation, ctx: KernelContext) -> np.ndarray:
    """The symmetrized influence-function pair kernel, componentwise in the
    contrast: half the sum of both role assignments' residual terms plus both
    orderings' score-weighted pairwise means.

    Reference implementation for single pairs; the estimators evaluate the
    same quantity through the pair-sum engine.
    """
    wt_i, wc_i, c_i = _obs_unit_values(ctx, oi)
    wt_j, wc_j, c_j = _obs_unit_values(ctx, oj)
    mu = ctx.bundle.pairwise_mean
    zt, dt = ctx.t_cell
    zc, dc = ctx.c_cell
    mu_ij = mu.predict_mu(zt, dt, zc, dc, np.asarray(oi.x), np.asarray(oj.x))
    mu_ji = mu.predict_mu(zt, dt, zc, dc, np.asarray(oj.x), np.asarray(oi.x))
    dim = ctx.contrast.dim
    resid_ij = wt_i * wc_j * (eval_contrast(ctx.contrast, oi.y, oj.y) - mu_ij) if wt_i * wc_j != 0.0 else np.zeros(dim)
    resid_ji = wt_j * wc_i * (eval_contrast(ctx.contrast, oj.y, oi.y) - mu_ji) if wt_j * wc_i != 0.0 else np.zeros(dim)
    return 0.5 * (resid_ij + resid_ji + c_i * c_j * mu_ij + c_j * c_i * mu_ji)


def tr_estimate(
    data: Dataset,
    ctx: KernelContext,
    strategy: str = "auto",
    threads: int = 1,
) -> EstimateReport:
    """Triply robust estimator: the pair-kernel U-statistic over the squared
    mean unit score.

    The i<j sum of the symmetrized kernel expands into two ordered-pair
    sums, each halved twice (once by the kernel, once by the pair count), so
    the numerator is {sum_(i != j) wt_i wc_j (H_ij - MU_ij) + sum_(i != j)
    c_i c_j MU_ij} / {n(n-1)}.
    """
    ctx.check_denominator()
    ctx.require_defined_outcomes()
    n = ctx.n
    if n < 2:
        raise ValueError("need at least two rows for a pair estimator")
    eng = ctx.engine(None, strategy, threads)
    mu = ctx.mu_parts()
    resid = eng.resid_sum(ctx.rows_t, ctx.rows_c, ctx.wt, ctx.wc, mu)
    allrows = np.arange(n)
    psimu = eng.mu_sum(allrows, allrows, ctx.cvec, ctx.cvec, mu, exclude_diagonal=True)
    numerator = (resid + psimu) / (n * (n - 1))
    denom = ctx.ehat**2
    return EstimateReport(
        point=numerator / denom,
        numerator=numerator,
        denominator=denom,
        meta={
            "estimator": "tr",
            "stratum": ctx.stratum.value,
            "n": n,
            "ehat": ctx.ehat,
            "p1_hat": ctx.p1_hat,
            "p0_hat": ctx.p0_hat,
        },
    )


# ---------------------------------------------------------------------------
# pair-block partition and the cross-fitted estimator


@dataclass(frozen=True)
class PairPartition:
    """K folds of units and the L = K(K+1)/2 blocks of unordered index pairs.

    Block (a, b) with a < b holds every cross pair between folds a and b;
    block (a, a) holds the within-fold pairs. A block's training set is the
    complement of the folds it touches.
    """

    n: int
    folds: list[np.ndarray]
    block_folds: list[tuple[int, int]]

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    @property
    def n_blocks(self) -> int:
        return len(self.block_folds)

    def fold_train(self, k: int) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[k]] = False
        return np.flatnonzero(mask)

    def block_train(self, l: int) -> np.ndarray:
        a, b = self.block_folds[l]
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[a]] = False
        mask[self.folds[b]] = False
        return np.flatnonzero(mask)

    def block_pairs(self, l: int) -> np.ndarray:
        """The block's unordered pairs as an (m, 2) array with i < j."""
        a, b = self.block_folds[l]
        if a == b:
            fa = np.sort(self.folds[a])
            ii, jj = np.triu_indices(fa.size, k=1)
            return np.column_stack([fa[ii], fa[jj]])
        ga, gb = np.meshgrid(self.folds[a], self.folds[b], indexing="ij")
        lo = np.minimum(ga.ravel(), gb.ravel())
        hi = np.maximum(ga.ravel(), gb.ravel())
        return np.column_stack([lo, hi])

    def structure(self) -> BlockStructure:
        fold_of = np.empty(self.n, dtype=np.intp)
        for k, idx in enumerate(self.folds):
            fold_of[idx] = k
        kf = self.n_folds
        block_id = np.empty((kf, kf), dtype=np.intp)
        for l, (a, b) in enumerate(self.block_folds):
            block_id[a, b] = l
            block_id[b, a] = l
        return BlockStructure(fold_of, block_id, self.n_blocks)


def partition_pairs(n: int, k: int, rng_seed: int | None = None) -> PairPartition:
    """Split units into K near-equal folds (shuffled when seeded, identity
    order otherwise) and form the pair blocks.

    Fold boundaries are the rounded multiples of n/K, so n=10, K=3 gives
    sizes (3, 4, 3).
    """
    if not 2 <= k <= n // 2:
        raise BadK(n, k)
    perm = np.arange(n) if rng_seed is None else np.random.default_rng(rng_seed).permutation(n)
    bounds = [(2 * j * n + k) // (2 * k) for j in range(k + 1)]
    folds = [np.sort(perm[bounds[j] : bounds[j + 1]]) for j in range(k)]
    block_folds = [(a, b) for a in range(k) for b in range(a, k)]
    return PairPartition(n, folds, block_folds)


def dml_estimate(
    data: Dataset,
    estimand: EstimandSpec,
    nuisance: NuisanceSpec | None = None,
    k: int = 5,
    rng_seed: int | None = None,
    delta: float = 0.0,
    oracle_bundle: NuisanceBundle | None = None,
    partition: PairPartition | None = None,
    strategy: str = "auto",
    threads: int = 1,
    _context_builder=None,
    _unit_score_cf=None,
) -> EstimateReport:
    """Cross-fitted estimator: block-local bundles in the pair-kernel
    numerator, fold-local propensity/intermediate fits in the denominator.

    With ``oracle_bundle`` no fitting happens; every block and fold uses the
    injected bundle, which makes the result coincide with the single-sample
    triply robust estimator (bitwise under the tiled strategy).

    The two underscore hooks let the sensitivity interface swap in its own
    context construction and per-unit score while reusing the partition,
    fitting, and pair-sum assembly unchanged.
    """
    validate_dataset(data)
    if estimand.stratum is StratumId.S01 and _context_builder is None:
        raise StratumNotAllowed(
            "stratum 01 has no estimator under monotonicity; use the sensitivity interface"
        )
    nuisance = nuisance if nuisance is not None else NuisanceSpec()
    n = data.n
    part = partition if partition is not None else partition_pairs(n, k, rng_seed)
    kf, nl = part.n_folds, part.n_blocks
    if oracle_bundle is None and kf < 3:
        # the off-diagonal block of a 2-fold split has an empty training set
        raise ConfigError("cross-fitting with fitted nuisances needs K >= 3 folds")
    contrast = estimand.contrast
    stratum = estimand.stratum

    # block-local bundles (diagonal blocks double as the fold-local fits:
    # block (a, a) trains on the complement of fold a, exactly the fold rule)
    if oracle_bundle is not None:
        block_bundles = [oracle_bundle] * nl
    else:
        block_bundles = []
        for l in range(nl):
            idx = part.block_train(l)
            block_bundles.append(
                fit_nuisance_bundle(
                    data.subset(idx),
                    nuisance,
                    contrast,
                    strata=(stratum,),
                    training_indices=idx,
                    rng_seed=rng_seed,
                )
            )

    # cross-fitted denominator: each unit's psi and score under its own
    # fold's models
    if _unit_score_cf is None:
        _unit_score_cf = lambda bundle, psi1, psi0: _unit_score(stratum, psi1, psi0)
    psi1_cf = np.empty(n)
    psi0_cf = np.empty(n)
    cvec_cf = np.empty(n)
    diag = {a: block_bundles[part.block_folds.index((a, a))] for a in range(kf)}
    for a in range(kf):
        sub = diag[a].subset
        p1_all = psi_dz_values(data, sub, 1)
        p0_all = psi_dz_values(data, sub, 0)
        c_all = _unit_score_cf(diag[a], p1_all, p0_all)
        rows = part.folds[a]
        psi1_cf[rows] = p1_all[rows]
        psi0_cf[rows] = p0_all[rows]
        cvec_cf[rows] = c_all[rows]
    ehat = float(np.sum(cvec_cf) / n)
    if abs(ehat) < DENOMINATOR_GUARD:
        raise DenominatorNearZero(stratum.value, ehat)

    # per-block unit-level arrays for the numerator
    if _context_builder is None:
        _context_builder = make_kernel_context
    contexts = [
        _context_builder(data, b, stratum, contrast, delta, validate=False)
        for b in block_bundles
    ]
    ctx0 = contexts[0]
    ctx0.require_defined_outcomes()
    wt = np.stack([c.wt for c in contexts])
    wc = np.stack([c.wc for c in contexts])
    cvec = np.stack([c.cvec for c in contexts])
    mu = ctx0.mu_parts(block_bundles)
    structure = part.structure()
    eng = ctx0.engine(structure, strategy, threads)
    resid = eng.resid_sum(ctx0.rows_t, ctx0.rows_c, wt, wc, mu)
    allrows = np.arange(n)
    psimu = eng.mu_sum(allrows, allrows, cvec, cvec, mu, exclude_diagonal=True)
    numerator = (resid + psimu) / (n * (n - 1))
    denom = ehat**2
    return EstimateReport(
        point=numerator / denom,
        numerator=numerator,
        denominator=denom,
        meta={
            "estimator": "dml",
            "stratum": stratum.value,
            "n": n,
            "ehat": ehat,
            "k_folds": kf,
            "n_blocks": nl,
            "rng_seed": rng_seed,
            "fold_sizes": [int(f.size) for f in part.folds],
            "oracle": oracle_bundle is not None,
        },
    )
