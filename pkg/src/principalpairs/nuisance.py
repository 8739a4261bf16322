"""Nuisance components: treatment propensity, intermediate probabilities
(hence principal scores), and pairwise outcome means.

Parametric solvers (logistic IRLS, least squares, cumulative-logit MLE) are
implemented here; nonparametric learners come from a pluggable registry so
cross-fitted estimation can swap them in. Pairwise means are always built
compositionally from unit-level outcome models fitted within observed (z, d)
cells on rows with a defined outcome, never by direct regression on pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .core import ContrastFunction, Dataset, StratumId
from .errors import (
    EmptyCell,
    MissingCategory,
    NoConvergence,
    NonmonotoneCutpoints,
    NonpositiveSigma,
    NotAProbabilityVector,
    RankDeficientDesign,
    SeparationDetected,
    SingularInformation,
    UnknownLearnerKind,
    UnsupportedContrast,
)

__all__ = [
    "fit_logistic",
    "fit_gaussian_outcome",
    "fit_ordinal_outcome",
    "ordinal_category_probs",
    "pairwise_mean_gaussian",
    "pairwise_mean_ordinal",
    "PrincipalScores",
    "predict_principal_scores",
    "PropensityModel",
    "IntermediateModel",
    "PairwiseMeanModel",
    "LearnerSpec",
    "NuisanceSpec",
    "NuisanceBundle",
    "NuisanceSubset",
    "fit_nuisance_bundle",
    "fit_nuisance_subset",
    "register_learner",
    "learner_kinds",
    "STRATUM_CELLS",
    "cells_for_strata",
]

DEFAULT_EPS = 0.01  # probability clipping threshold
COEF_CAP = 30.0  # sup-norm cap declaring logistic separation


def _add_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.hstack([np.ones((x.shape[0], 1)), x])


# ---------------------------------------------------------------------------
# parametric solvers


def fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> np.ndarray:
    """Newton (IRLS) maximum likelihood for a logistic model.

    An intercept column is prepended internally; the returned coefficient
    vector has length ``p + 1``. Convergence means the score (gradient of the
    log likelihood) has sup-norm below ``tol``.
    """
    design = _add_intercept(x)
    y = np.asarray(y, dtype=float)
    if design.shape[0] != y.shape[0]:
        raise ValueError("x and y row counts differ")
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        if np.max(np.abs(beta)) > COEF_CAP:
            raise SeparationDetected(
                f"coefficient sup-norm exceeded {COEF_CAP:g}; data are (quasi-)separated"
            )
        eta = design @ beta
        mu = expit(eta)
        score = design.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            return beta
        w = mu * (1.0 - mu)
        hess = design.T @ (design * w[:, None])
        try:
            cond = np.linalg.cond(hess)
        except np.linalg.LinAlgError:  # pragma: no cover - defensive
            raise SingularInformation("information matrix is not finite")
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularInformation(f"information matrix condition number {cond:.2e}")
        beta = beta + np.linalg.solve(hess, score)
    raise NoConvergence("logistic IRLS", max_iter)


def _ols(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficientDesign(
            f"design has rank {rank} < {design.shape[1]} columns"
        )
    resid = y - design @ coef
    return coef, float(resid @ resid)


def fit_gaussian_outcome(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares fit of a linear mean model with intercept.

    Returns the coefficient vector (length ``p + 1``) and the residual
    standard deviation with denominator ``n - #params`` (0.0 when the fit
    interpolates).
    """
    design = _add_intercept(x)
    y = np.asarray(y, dtype=float)
    coef, rss = _ols(design, y)
    dof = design.shape[0] - design.shape[1]
    sigma = float(np.sqrt(rss / dof)) if dof > 0 else 0.0
    return coef, sigma


def _ordinal_nll_grad(
    t: np.ndarray, design: np.ndarray, cat: np.ndarray, q: int
) -> tuple[float, np.ndarray]:
    # t = (t_1..t_{q-1}, b_1..b_p); zeta_1 = t_1, zeta_j = zeta_{j-1} + exp(t_j)
    ncut = q - 1
    tz, b = t[:ncut], t[ncut:]
    steps = np.exp(tz[1:])
    zeta = np.concatenate([[tz[0]], tz[0] + np.cumsum(steps)])
    eta = design @ b
    # upper / lower cumulative probabilities per row
    hi_idx = cat - 1  # zeta index for P(Y <= cat), out of range when cat == q
    lo_idx = cat - 2
    s_hi = np.where(cat == q, 1.0, expit(zeta[np.minimum(hi_idx, ncut - 1)] + eta))
    s_lo = np.where(cat == 1, 0.0, expit(zeta[np.maximum(lo_idx, 0)] + eta))
    prob = np.clip(s_hi - s_lo, 1e-300, None)
    nll = -float(np.sum(np.log(prob)))

    phi_hi = np.where(cat == q, 0.0, s_hi * (1.0 - s_hi))
    phi_lo = np.where(cat == 1, 0.0, s_lo * (1.0 - s_lo))
    dl_deta = (phi_hi - phi_lo) / prob
    grad_b = design.T @ dl_deta
    # d logProb / d zeta_j: +phi(zeta_j + eta)/P for rows with cat == j,
    # -phi(zeta_j + eta)/P for rows with cat == j + 1
    contrib_hi = np.where(cat <= ncut, phi_hi / prob, 0.0)
    contrib_lo = np.where(cat >= 2, phi_lo / prob, 0.0)
    grad_zeta = np.bincount(np.clip(hi_idx, 0, ncut - 1), weights=contrib_hi, minlength=ncut)
    grad_zeta -= np.bincount(np.clip(lo_idx, 0, ncut - 1), weights=contrib_lo, minlength=ncut)
    # chain rule to t: zeta_k depends on t_1 and on t_j (j <= k) via exp steps
    grad_tz = np.empty(ncut)
    rev_cum = np.cumsum(grad_zeta[::-1])[::-1]
    grad_tz[0] = rev_cum[0]
    if ncut > 1:
        grad_tz[1:] = steps * rev_cum[1:]
    return nll, -np.concatenate([grad_tz, grad_b])


def fit_ordinal_outcome(
    x: np.ndarray,
    y: np.ndarray,
    q: int | None = None,
    max_iter: int = 300,
    tol: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative-logit MLE: logit P(Y <= j | x) = zeta_j + x.b.

    Cutpoints are kept strictly increasing through the reparameterization
    zeta_j = zeta_{j-1} + exp(t_j). Returns (cutpoints, slopes).
    """
    from scipy.optimize import minimize

    design = np.atleast_2d(np.asarray(x, dtype=float))
    cat = np.asarray(y, dtype=int)
    if q is None:
        q = int(cat.max())
    present = np.unique(cat)
    missing = [c for c in range(1, q + 1) if c not in present]
    if missing:
        raise MissingCategory(missing, q)

    # start from the intercept-only closed form (empirical cumulative logits)
    shares = np.bincount(cat, minlength=q + 1)[1:] / cat.size
    cum = np.clip(np.cumsum(shares)[:-1], 1e-6, 1 - 1e-6)
    zeta0 = np.log(cum / (1 - cum))
    t0 = np.concatenate(
        [[zeta0[0]], np.log(np.clip(np.diff(zeta0), 1e-6, None)), np.zeros(design.shape[1])]
    )

    ncut = q - 1
    start = t0
    for _ in range(3):  # cold start plus up to two warm restarts
        res = minimize(
            _ordinal_nll_grad,
            start,
            args=(design, cat, q),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-10},
        )
        tz, b = res.x[:ncut], res.x[ncut:]
        zeta = np.concatenate([[tz[0]], tz[0] + np.cumsum(np.exp(tz[1:]))])
        # convergence contract is on the per-unit original-parameter score,
        # so the criterion does not tighten as the sample grows
        score = _ordinal_score(zeta, b, design, cat, q) / cat.size
        grad_norm = float(np.max(np.abs(score)))
        if grad_norm <= tol:
            break
        start = res.x
    if grad_norm > tol:
        raise NoConvergence(f"ordinal MLE (mean score sup-norm {grad_norm:.2e})", max_iter)
    if np.any(np.diff(zeta) <= 0):  # unreachable by construction
        raise NonmonotoneCutpoints(f"cutpoints {zeta} not increasing")
    return zeta, b


def _ordinal_score(
    zeta: np.ndarray, b: np.ndarray, design: np.ndarray, cat: np.ndarray, q: int
) -> np.ndarray:
    """Log-likelihood gradient in the (zeta, b) parameterization."""
    ncut = q - 1
    eta = design @ b
    hi_idx = cat - 1
    lo_idx = cat - 2
    s_hi = np.where(cat == q, 1.0, expit(zeta[np.minimum(hi_idx, ncut - 1)] + eta))
    s_lo = np.where(cat == 1, 0.0, expit(zeta[np.maximum(lo_idx, 0)] + eta))
    prob = np.clip(s_hi - s_lo, 1e-300, None)
    phi_hi = np.where(cat == q, 0.0, s_hi * (1.0 - s_hi))
    phi_lo = np.where(cat == 1, 0.0, s_lo * (1.0 - s_lo))
    grad_zeta = np.bincount(
        np.clip(hi_idx, 0, ncut - 1), weights=np.where(cat <= ncut, phi_hi / prob, 0.0), minlength=ncut
    )
    grad_zeta -= np.bincount(
        np.clip(lo_idx, 0, ncut - 1), weights=np.where(cat >= 2, phi_lo / prob, 0.0), minlength=ncut
    )
    grad_b = design.T @ ((phi_hi - phi_lo) / prob)
    return np.concatenate([grad_zeta, grad_b])


def ordinal_category_probs(zeta: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Category probabilities (n, q) implied by a cumulative-logit fit."""
    design = np.atleast_2d(np.asarray(x, dtype=float))
    eta = design @ b
    cum = expit(zeta[None, :] + eta[:, None])  # (n, q-1)
    cum = np.hstack([np.zeros((design.shape[0], 1)), cum, np.ones((design.shape[0], 1))])
    return np.diff(cum, axis=1)


# ---------------------------------------------------------------------------
# pairwise mean building blocks


def pairwise_mean_gaussian(f1, f2, sigma: float):
    """P(Y1 >= Y2) for independent Gaussians with means f1, f2 and common
    standard deviation sigma: Phi((f1 - f2) / (sqrt(2) sigma))."""
    if sigma <= 0:
        raise NonpositiveSigma(f"sigma={sigma!r} must be positive")
    return ndtr((np.asarray(f1, dtype=float) - np.asarray(f2, dtype=float)) / (np.sqrt(2.0) * sigma))


def _check_prob_vector(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
        raise NotAProbabilityVector(f"{p} is not a probability vector")
    return p


def pairwise_mean_ordinal(p1, p2) -> tuple[float, float]:
    """(win, loss) probabilities for two independent ordinal outcomes with
    category distributions p1 and p2: win sums p1[q] p2[q'] over q > q'."""
    p1 = _check_prob_vector(p1)
    p2 = _check_prob_vector(p2)
    if p1.shape != p2.shape:
        raise NotAProbabilityVector("category distributions differ in length")
    cum2 = np.concatenate([[0.0], np.cumsum(p2)])
    cum1 = np.concatenate([[0.0], np.cumsum(p1)])
    win = float(np.sum(p1[1:] * cum2[1:-1]))
    loss = float(np.sum(p2[1:] * cum1[1:-1]))
    return win, loss


# ---------------------------------------------------------------------------
# principal scores


@dataclass
class PrincipalScores:
    """Monotone principal scores with the e10 floor applied and the triple
    renormalized to sum to one; raw values are retained for diagnostics."""

    e10: np.ndarray
    e00: np.ndarray
    e11: np.ndarray
    raw_e10: np.ndarray
    raw_e00: np.ndarray
    raw_e11: np.ndarray
    n_floored: int

    def for_stratum(self, stratum: StratumId) -> np.ndarray:
        return {StratumId.S10: self.e10, StratumId.S00: self.e00, StratumId.S11: self.e11}[stratum]


def predict_principal_scores(
    model: "IntermediateModel", x: np.ndarray, delta: float = 0.0
) -> PrincipalScores:
    """Principal scores under monotonicity: e10 = p1 - p0, e00 = 1 - p1,
    e11 = p0, with e10 floored at ``delta`` and the triple renormalized.

    Crossing fits (p1 < p0) are handled by the floor; the number of floored
    units is reported, not raised.
    """
    p1 = model.predict_p(1, x)
    p0 = model.predict_p(0, x)
    raw_e10 = p1 - p0
    raw_e00 = 1.0 - p1
    raw_e11 = p0
    floored = raw_e10 < delta
    e10 = np.where(floored, delta, raw_e10)
    # renormalize only the floored units: untouched units already sum to one
    # and dividing them by their own float-rounded total would perturb bits
    total = np.where(floored, e10 + raw_e00 + raw_e11, 1.0)
    return PrincipalScores(
        e10 / total,
        raw_e00 / total,
        raw_e11 / total,
        raw_e10,
        raw_e00,
        raw_e11,
        int(np.count_nonzero(floored)),
    )


# ---------------------------------------------------------------------------
# fitted models


class PropensityModel:
    """pi(x) = P(Z=1 | X=x), clipped to [eps, 1 - eps]; clip events counted."""

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        eps: float = DEFAULT_EPS,
        transform: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> None:
        self._fn = fn
        self.eps = eps
        self.transform = transform
        self.clip_count = 0

    @staticmethod
    def from_logistic(coef: np.ndarray, eps: float = DEFAULT_EPS, transform=None) -> "PropensityModel":
        return PropensityModel(lambda x: expit(_add_intercept(x) @ coef), eps, transform)

    @staticmethod
    def from_function(fn, eps: float = DEFAULT_EPS) -> "PropensityModel":
        return PropensityModel(lambda x: np.asarray(fn(x), dtype=float), eps)

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.transform is not None:
            x = self.transform(x)
        p = np.asarray(self._fn(np.atleast_2d(x)), dtype=float)
        clipped = np.clip(p, self.eps, 1.0 - self.eps)
        self.clip_count += int(np.count_nonzero(clipped != p))
        return clipped


class IntermediateModel:
    """p_z(x) = P(D=1 | Z=z, X=x) for z in {0, 1}, clipped like the propensity."""

    def __init__(
        self,
        fn1: Callable[[np.ndarray], np.ndarray],
        fn0: Callable[[np.ndarray], np.ndarray],
        eps: float = DEFAULT_EPS,
        transform: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> None:
        self._fns = {1: fn1, 0: fn0}
        self.eps = eps
        self.transform = transform
        self.clip_count = 0

    @staticmethod
    def from_logistic_pair(coef1, coef0, eps: float = DEFAULT_EPS, transform=None) -> "IntermediateModel":
        return IntermediateModel(
            lambda x: expit(_add_intercept(x) @ coef1),
            lambda x: expit(_add_intercept(x) @ coef0),
            eps,
            transform,
        )

    @staticmethod
    def from_functions(fn1, fn0, eps: float = DEFAULT_EPS) -> "IntermediateModel":
        return IntermediateModel(
            lambda x: np.asarray(fn1(x), dtype=float),
            lambda x: np.asarray(fn0(x), dtype=float),
            eps,
        )

    def predict_p(self, z: int, x: np.ndarray) -> np.ndarray:
        if z not in (0, 1):
            raise ValueError("z must be 0 or 1")
        if self.transform is not None:
            x = self.transform(x)
        p = np.asarray(self._fns[z](np.atleast_2d(x)), dtype=float)
        clipped = np.clip(p, self.eps, 1.0 - self.eps)
        self.clip_count += int(np.count_nonzero(clipped != p))
        return clipped


_GAUSSIAN_COMPOSABLE = {"difference", "geq", "winpair"}


class PairwiseMeanModel:
    """mu_{z1 d1 z2 d2}(x1, x2): expected contrast between the outcome of a
    unit in observed cell (z1, d1) at covariates x1 and an independent unit in
    cell (z2, d2) at x2.

    Built compositionally from unit-level cell models. ``mode`` is
    ``"gaussian"`` (per-cell conditional means plus a pooled residual scale)
    or ``"ordinal"`` (per-cell category probabilities combined through the
    contrast's category matrix).
    """

    def __init__(
        self,
        mode: str,
        contrast: ContrastFunction,
        cell_fns: dict[tuple[int, int], Callable[[np.ndarray], np.ndarray]],
        sigma: float | None = None,
        q: int | None = None,
        transform: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> None:
        if mode not in ("gaussian", "ordinal"):
            raise ValueError(f"unknown pairwise-mean mode {mode!r}")
        if mode == "gaussian" and contrast.name not in _GAUSSIAN_COMPOSABLE:
            raise UnsupportedContrast(
                f"contrast {contrast.name!r} has no Gaussian pairwise-mean composition; "
                "supported: difference, geq, winpair"
            )
        self.mode = mode
        self.contrast = contrast
        self._cells = cell_fns
        self.sigma = sigma
        self.q = q
        self.transform = transform

    # -- unit-level views (consumed by the pair-sum engine) -----------------

    def cell_values(self, z: int, d: int, x: np.ndarray) -> np.ndarray:
        """Per-unit cell summary: conditional mean (n,) for gaussian mode,
        category probabilities (n, q) for ordinal mode."""
        if (z, d) not in self._cells:
            raise EmptyCell(z, d)
        if self.transform is not None:
            x = self.transform(x)
        return np.asarray(self._cells[(z, d)](np.atleast_2d(x)), dtype=float)

    def has_cell(self, z: int, d: int) -> bool:
        return (z, d) in self._cells

    # -- pair-level evaluation ---------------------------------------------

    def predict_mu_matrix(
        self, z1: int, d1: int, z2: int, d2: int, x1: np.ndarray, x2: np.ndarray
    ) -> np.ndarray:
        """All cross pairs: (dim, n1, n2)."""
        v1 = self.cell_values(z1, d1, x1)
        v2 = self.cell_values(z2, d2, x2)
        if self.mode == "gaussian":
            diff = v1[:, None] - v2[None, :]
            name = self.contrast.name
            if name == "difference":
                return diff[None, :, :]
            if self.sigma is None or self.sigma <= 0:
                raise NonpositiveSigma(
                    f"residual scale {self.sigma!r} must be positive for {name!r}"
                )
            scaled = diff / (np.sqrt(2.0) * self.sigma)
            if name == "geq":
                return ndtr(scaled)[None, :, :]
            return np.stack([ndtr(scaled), ndtr(-scaled)])
        hmat = self.contrast.category_matrix(self.q)
        return np.einsum("iq,cqr,jr->cij", v1, hmat, v2)

    def predict_mu(self, z1: int, d1: int, z2: int, d2: int, x1, x2) -> np.ndarray:
        """Single pair of covariate vectors: contrast-dimension vector."""
        out = self.predict_mu_matrix(
            z1, d1, z2, d2, np.atleast_2d(x1), np.atleast_2d(x2)
        )
        return out[:, 0, 0]


# ---------------------------------------------------------------------------
# learner registry


@dataclass(frozen=True)
class LearnerSpec:
    """Name plus hyperparameters resolving to a registered learner."""

    kind: str = "parametric"
    hyperparameters: dict = field(default_factory=dict)


class _ParametricLearner:
    """Logistic / least-squares / cumulative-logit fits, by role."""

    def fit_prob(self, x, y, hp, seed):
        coef = fit_logistic(x, y, max_iter=hp.get("max_iter", 100), tol=hp.get("tol", 1e-8))
        return lambda xx: expit(_add_intercept(xx) @ coef)

    def fit_continuous(self, x, y, hp, seed):
        design = _add_intercept(x)
        coef, rss = _ols(design, y)
        return (lambda xx: _add_intercept(xx) @ coef), rss, design.shape[1]

    def fit_ordinal(self, x, y, q, hp, seed):
        zeta, b = fit_ordinal_outcome(x, y, q, max_iter=hp.get("max_iter", 300))
        return lambda xx: ordinal_category_probs(zeta, b, xx)


def _proba_of_class_one(model, x, classes) -> np.ndarray:
    proba = model.predict_proba(x)
    where = np.flatnonzero(classes == 1)
    return proba[:, where[0]] if where.size else np.zeros(x.shape[0])


class _KnnLearner:
    def _k(self, hp, n):
        return min(hp.get("n_neighbors", 50), n)

    def fit_prob(self, x, y, hp, seed):
        from sklearn.neighbors import KNeighborsClassifier

        m = KNeighborsClassifier(n_neighbors=self._k(hp, len(y))).fit(x, np.asarray(y, dtype=int))
        return lambda xx: _proba_of_class_one(m, np.atleast_2d(xx), m.classes_)

    def fit_continuous(self, x, y, hp, seed):
        from sklearn.neighbors import KNeighborsRegressor

        m = KNeighborsRegressor(n_neighbors=self._k(hp, len(y))).fit(x, y)
        resid = y - m.predict(x)
        return (lambda xx: m.predict(np.atleast_2d(xx))), float(resid @ resid), 0

    def fit_ordinal(self, x, y, q, hp, seed):
        from sklearn.neighbors import KNeighborsClassifier

        m = KNeighborsClassifier(n_neighbors=self._k(hp, len(y))).fit(x, np.asarray(y, dtype=int))

        def predict(xx):
            proba = m.predict_proba(np.atleast_2d(xx))
            out = np.zeros((proba.shape[0], q))
            out[:, np.asarray(m.classes_, dtype=int) - 1] = proba
            return out

        return predict


class _BoostedStumpsLearner:
    """Gradient boosting with depth-1 trees."""

    def _hp(self, hp, seed):
        return dict(
            n_estimators=hp.get("n_estimators", 200),
            learning_rate=hp.get("learning_rate", 0.1),
            max_depth=1,
            random_state=hp.get("random_state", seed if seed is not None else 0),
        )

    def fit_prob(self, x, y, hp, seed):
        from sklearn.ensemble import GradientBoostingClassifier

        yi = np.asarray(y, dtype=int)
        if np.unique(yi).size < 2:
            const = float(yi[0])
            return lambda xx: np.full(np.atleast_2d(xx).shape[0], const)
        m = GradientBoostingClassifier(**self._hp(hp, seed)).fit(x, yi)
        return lambda xx: _proba_of_class_one(m, np.atleast_2d(xx), m.classes_)

    def fit_continuous(self, x, y, hp, seed):
        from sklearn.ensemble import GradientBoostingRegressor

        m = GradientBoostingRegressor(**self._hp(hp, seed)).fit(x, y)
        resid = y - m.predict(x)
        return (lambda xx: m.predict(np.atleast_2d(xx))), float(resid @ resid), 0

    def fit_ordinal(self, x, y, q, hp, seed):
        from sklearn.ensemble import GradientBoostingClassifier

        m = GradientBoostingClassifier(**self._hp(hp, seed)).fit(x, np.asarray(y, dtype=int))

        def predict(xx):
            proba = m.predict_proba(np.atleast_2d(xx))
            out = np.zeros((proba.shape[0], q))
            out[:, np.asarray(m.classes_, dtype=int) - 1] = proba
            return out

        return predict


_parametric = _ParametricLearner()
_REGISTRY: dict[str, object] = {
    "parametric": _parametric,
    "parametric-logistic": _parametric,
    "parametric-gaussian": _parametric,
    "parametric-ordinal": _parametric,
    "knn": _KnnLearner(),
    "boosted-stumps": _BoostedStumpsLearner(),
}


def register_learner(kind: str, learner: object) -> None:
    """Register a custom learner; it must expose the fit_* methods it supports."""
    _REGISTRY[kind] = learner


def learner_kinds() -> list[str]:
    return list(_REGISTRY)


def _resolve(spec: LearnerSpec):
    if spec.kind not in _REGISTRY:
        raise UnknownLearnerKind(spec.kind, list(_REGISTRY))
    return _REGISTRY[spec.kind]


# ---------------------------------------------------------------------------
# bundles


@dataclass
class NuisanceSubset:
    """Propensity and intermediate models only (enough for the doubly robust
    intermediate-probability estimator and its scores)."""

    propensity: PropensityModel
    intermediate: IntermediateModel
    training_indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class NuisanceBundle:
    """All three nuisance components fitted on a common training set."""

    propensity: PropensityModel
    intermediate: IntermediateModel
    pairwise_mean: PairwiseMeanModel
    training_indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def subset(self) -> NuisanceSubset:
        return NuisanceSubset(self.propensity, self.intermediate, self.training_indices, self.meta)

    def clip_counts(self) -> dict[str, int]:
        return {
            "propensity": self.propensity.clip_count,
            "intermediate": self.intermediate.clip_count,
        }


@dataclass
class NuisanceSpec:
    """Learner choice and feature maps per nuisance component.

    A ``*_features`` callable replaces the covariates seen by that component
    (both at fit and predict time); leaving it None fits on the raw
    covariates. ``eps`` is the probability clipping threshold and ``delta``
    the floor for the e10 principal score.
    """

    propensity: LearnerSpec = field(default_factory=LearnerSpec)
    intermediate: LearnerSpec = field(default_factory=LearnerSpec)
    outcome: LearnerSpec = field(default_factory=LearnerSpec)
    propensity_features: Callable[[np.ndarray], np.ndarray] | None = None
    intermediate_features: Callable[[np.ndarray], np.ndarray] | None = None
    outcome_features: Callable[[np.ndarray], np.ndarray] | None = None
    eps: float = DEFAULT_EPS
    delta: float = 0.0


STRATUM_CELLS: dict[StratumId, tuple[tuple[int, int], tuple[int, int]]] = {
    # (treated-arm cell, control-arm cell) observing each stratum's two roles
    StratumId.S10: ((1, 1), (0, 0)),
    StratumId.S00: ((1, 0), (0, 0)),
    StratumId.S11: ((1, 1), (0, 1)),
    StratumId.S01: ((1, 0), (0, 1)),
}


def cells_for_strata(strata: Sequence[StratumId]) -> set[tuple[int, int]]:
    cells: set[tuple[int, int]] = set()
    for s in strata:
        t, c = STRATUM_CELLS[s]
        cells.add(t)
        cells.add(c)
    return cells


def fit_nuisance_bundle(
    train: Dataset,
    spec: NuisanceSpec,
    contrast: ContrastFunction,
    strata: Sequence[StratumId] = (StratumId.S10, StratumId.S00, StratumId.S11),
    training_indices: np.ndarray | None = None,
    rng_seed: int | None = None,
) -> NuisanceBundle:
    """Fit propensity, intermediate, and pairwise-mean models on ``train``.

    The pairwise mean is composed from unit-level outcome models fitted
    within each observed (z, d) cell on rows with a defined outcome; a cell
    required by the requested strata but empty raises :class:`EmptyCell`.
    ``training_indices`` (positions in some enclosing dataset) are recorded so
    cross-fitting callers can assert the held-out contract.
    """
    x, z, d, y = train.x, np.asarray(train.z), np.asarray(train.d), train.y
    propensity, intermediate = _fit_pi_p(train, spec, rng_seed)

    def feat(fn, xx):
        return fn(xx) if fn is not None else xx

    # pairwise outcome mean, composed from per-cell unit models
    ol = _resolve(spec.outcome)
    xo = feat(spec.outcome_features, x)
    required = cells_for_strata(strata)
    cell_fns: dict[tuple[int, int], Callable] = {}
    if train.outcome_kind.is_ordinal:
        q = train.outcome_kind.q
        for zz, dd in sorted(required | _observed_cells(z, d, train.y_defined)):
            rows = (z == zz) & (d == dd) & train.y_defined
            if not np.any(rows):
                if (zz, dd) in required:
                    raise EmptyCell(zz, dd)
                continue
            cell_fns[(zz, dd)] = ol.fit_ordinal(
                xo[rows], y[rows].astype(int), q, spec.outcome.hyperparameters, rng_seed
            )
        mu = PairwiseMeanModel(
            "ordinal", contrast, cell_fns, q=q, transform=spec.outcome_features
        )
    else:
        rss_total, dof_total = 0.0, 0
        for zz, dd in sorted(required | _observed_cells(z, d, train.y_defined)):
            rows = (z == zz) & (d == dd) & train.y_defined
            if not np.any(rows):
                if (zz, dd) in required:
                    raise EmptyCell(zz, dd)
                continue
            fn, rss, nparams = ol.fit_continuous(
                xo[rows], y[rows], spec.outcome.hyperparameters, rng_seed
            )
            cell_fns[(zz, dd)] = fn
            rss_total += rss
            dof_total += int(np.count_nonzero(rows)) - nparams
        sigma = float(np.sqrt(rss_total / dof_total)) if dof_total > 0 else 0.0
        mu = PairwiseMeanModel(
            "gaussian", contrast, cell_fns, sigma=sigma, transform=spec.outcome_features
        )

    meta = {"n_train": train.n, "strata": [s.value for s in strata]}
    return NuisanceBundle(propensity, intermediate, mu, training_indices, meta)


def _observed_cells(z: np.ndarray, d: np.ndarray, defined: np.ndarray) -> set[tuple[int, int]]:
    cells = set()
    for zz in (0, 1):
        for dd in (0, 1):
            if np.any((z == zz) & (d == dd) & defined):
                cells.add((zz, dd))
    return cells


def _fit_pi_p(
    train: Dataset, spec: NuisanceSpec, rng_seed: int | None
) -> tuple[PropensityModel, IntermediateModel]:
    x, z, d = train.x, np.asarray(train.z), np.asarray(train.d)

    def feat(fn, xx):
        return fn(xx) if fn is not None else xx

    pl = _resolve(spec.propensity)
    pi_fn = pl.fit_prob(
        feat(spec.propensity_features, x), z.astype(float), spec.propensity.hyperparameters, rng_seed
    )
    propensity = PropensityModel(pi_fn, spec.eps, spec.propensity_features)

    il = _resolve(spec.intermediate)
    xi = feat(spec.intermediate_features, x)
    arm_fns = {}
    for zz in (1, 0):
        rows = z == zz
        arm_fns[zz] = il.fit_prob(
            xi[rows], d[rows].astype(float), spec.intermediate.hyperparameters, rng_seed
        )
    intermediate = IntermediateModel(arm_fns[1], arm_fns[0], spec.eps, spec.intermediate_features)
    return propensity, intermediate


def fit_nuisance_subset(
    train: Dataset,
    spec: NuisanceSpec,
    training_indices: np.ndarray | None = None,
    rng_seed: int | None = None,
) -> NuisanceSubset:
    """Fit only the propensity and intermediate models (the components the
    doubly robust intermediate-probability estimator needs)."""
    propensity, intermediate = _fit_pi_p(train, spec, rng_seed)
    return NuisanceSubset(propensity, intermediate, training_indices, {"n_train": train.n})
