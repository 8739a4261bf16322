"""Relaxed-monotonicity analysis.

Monotonicity (treatment can only switch the intermediate on, never off) rules
out the defier stratum. The relaxation indexes departure by eta(X), the ratio
of the defier score to the complier score at X; eta identically zero recovers
monotonicity, and eta = 1 is the boundary where the two cancel and principal
scores stop being identified. Given eta, all four stratum scores are again
point identified from (p1, p0):

    e10 = (p1 - p0) / (1 - eta)          compliers
    e01 = eta (p1 - p0) / (1 - eta)      defiers
    e00 = (1 - p1 - eta (1 - p0)) / (1 - eta)
    e11 = (p0 - eta p1) / (1 - eta)

and each stratum's estimator is the same scaled pair-kernel statistic with
these scores and the matching per-unit score in place of the monotone ones.
The stratum-01 cells are (z=1, d=0) and (z=0, d=1); its per-unit score is
eta (psi1 - psi0) / (1 - eta).

Feasibility: nonnegativity of e00 and e11 caps eta at
1 - (p1 - p0)/min(p1, 1 - p0), which varies with X. A constant-eta analysis
can therefore be infeasible for part of the covariate distribution; that is
reported as an error naming the offending quantile rather than silently
clipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ContrastFunction, Dataset, EstimandSpec, EstimateReport, StratumId, validate_dataset
from .errors import EtaInfeasible, EtaInfeasibleAtSomeX, EtaIsOne
from .estimators import (
    KernelContext,
    _cell_prob,
    dml_estimate,
    psi_dz_values,
    tr_estimate,
)
from .nuisance import STRATUM_CELLS, NuisanceBundle, NuisanceSpec, fit_nuisance_bundle

__all__ = [
    "SensitivityFunction",
    "eta_feasible_bound",
    "eta_principal_scores",
    "EtaScores",
    "make_eta_kernel_context",
    "sensitivity_estimate",
]

_FEAS_TOL = 1e-10


def eta_feasible_bound(p1, p0):
    """Largest eta compatible with nonnegative stratum scores at (p1, p0),
    capped at 1. Equal arms give 1; crossing fitted arms (p1 < p0) also cap
    at 1 since any eta below the boundary is then formally admissible."""
    p1a = np.asarray(p1, dtype=float)
    p0a = np.asarray(p0, dtype=float)
    denom = np.maximum(np.minimum(p1a, 1.0 - p0a), 1e-12)
    bound = np.clip(1.0 - (p1a - p0a) / denom, 0.0, 1.0)
    if bound.ndim == 0:
        return float(bound)
    return bound


def eta_principal_scores(p1, p0, eta, check: bool = True):
    """The four stratum scores (e10, e01, e00, e11) at sensitivity level eta.

    Inputs broadcast; scalar inputs give scalar outputs. With ``check`` the
    quadruple is validated (eta inside [0, bound], components nonnegative up
    to rounding) and tiny negative rounding residue is clipped to zero. The
    arithmetic is arranged so eta = 0 reproduces the monotone scores exactly,
    not just approximately.
    """
    p1a = np.asarray(p1, dtype=float)
    p0a = np.asarray(p0, dtype=float)
    etaa = np.asarray(eta, dtype=float)
    scalar = p1a.ndim == 0 and p0a.ndim == 0 and etaa.ndim == 0
    if np.any(etaa >= 1.0):
        raise EtaIsOne()
    if check:
        if np.any(etaa < 0.0):
            raise EtaInfeasible(float(np.min(etaa)), 0.0)
        bound = np.asarray(eta_feasible_bound(p1a, p0a))
        eb, bb = np.broadcast_arrays(etaa, bound)
        viol = eb > bb + _FEAS_TOL
        if np.any(viol):
            i = int(np.argmax(np.ravel(viol)))
            raise EtaInfeasible(float(np.ravel(eb)[i]), float(np.ravel(bb)[i]))
    om = 1.0 - etaa
    e10 = (p1a - p0a) / om
    e01 = etaa * (p1a - p0a) / om
    e00 = (1.0 - p1a - etaa * (1.0 - p0a)) / om
    e11 = (p0a - etaa * p1a) / om
    if check:
        e10 = np.maximum(e10, 0.0)
        e01 = np.maximum(e01, 0.0)
        e00 = np.maximum(e00, 0.0)
        e11 = np.maximum(e11, 0.0)
    if scalar:
        return float(e10), float(e01), float(e00), float(e11)
    return e10, e01, e00, e11


@dataclass(frozen=True)
class SensitivityFunction:
    """eta as a function of the fitted intermediate probabilities.

    ``constant``: eta(X) = eta0 everywhere (may be infeasible for some X).
    ``proportional``: eta(X) = eta0 times the feasibility bound at X, which
    is feasible for every X whenever 0 <= eta0 <= 1.
    """

    form: str
    eta0: float

    def __post_init__(self) -> None:
        if self.form not in ("constant", "proportional"):
            raise ValueError(f"unknown sensitivity form {self.form!r}")
        if not np.isfinite(self.eta0) or self.eta0 < 0.0:
            raise EtaInfeasible(self.eta0, 0.0)
        if self.form == "constant" and self.eta0 >= 1.0:
            raise EtaIsOne()
        if self.form == "proportional" and self.eta0 > 1.0:
            raise EtaInfeasible(self.eta0, 1.0)

    @staticmethod
    def constant(eta0: float) -> "SensitivityFunction":
        return SensitivityFunction("constant", float(eta0))

    @staticmethod
    def proportional(eta0: float) -> "SensitivityFunction":
        return SensitivityFunction("proportional", float(eta0))

    @property
    def is_zero(self) -> bool:
        return self.eta0 == 0.0

    def values(self, p1: np.ndarray, p0: np.ndarray) -> np.ndarray:
        p1 = np.asarray(p1, dtype=float)
        if self.form == "constant":
            return np.full(p1.shape, self.eta0)
        return self.eta0 * eta_feasible_bound(p1, np.asarray(p0, dtype=float))


@dataclass(frozen=True)
class EtaScores:
    """Per-unit stratum-score quadruple at unit-specific eta, after floors.

    e10 is floored at delta and the others at zero; only units a floor
    actually touched are renormalized, so untouched units keep the raw
    quadruple bit for bit (they already sum to one).
    """

    e10: np.ndarray
    e01: np.ndarray
    e00: np.ndarray
    e11: np.ndarray
    eta: np.ndarray
    n_floored: int

    def for_stratum(self, stratum: StratumId) -> np.ndarray:
        return {
            StratumId.S10: self.e10,
            StratumId.S01: self.e01,
            StratumId.S00: self.e00,
            StratumId.S11: self.e11,
        }[stratum]


def _floored_eta_scores(p1: np.ndarray, p0: np.ndarray, eta: np.ndarray, delta: float) -> EtaScores:
    r10, r01, r00, r11 = eta_principal_scores(p1, p0, eta, check=False)
    floored10 = r10 < delta
    e10 = np.where(floored10, delta, r10)
    e01 = np.where(r01 < 0.0, 0.0, r01)
    e00 = np.where(r00 < 0.0, 0.0, r00)
    e11 = np.where(r11 < 0.0, 0.0, r11)
    touched = floored10 | (r01 < 0.0) | (r00 < 0.0) | (r11 < 0.0)
    total = np.where(touched, e10 + e01 + e00 + e11, 1.0)
    return EtaScores(
        e10 / total,
        e01 / total,
        e00 / total,
        e11 / total,
        eta,
        int(np.count_nonzero(touched)),
    )


def _eta_unit_score(stratum: StratumId, psi1: np.ndarray, psi0: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-unit stratum score with psi in place of p; its mean is the
    denominator's stratum proportion. Written so eta = 0 reduces bit for bit
    to the monotone per-unit scores."""
    om = 1.0 - eta
    if stratum is StratumId.S10:
        return (psi1 - psi0) / om
    if stratum is StratumId.S01:
        return eta * (psi1 - psi0) / om
    if stratum is StratumId.S00:
        return (1.0 - psi1 - eta * (1.0 - psi0)) / om
    return (psi0 - eta * psi1) / om  # S11


def _check_eta_feasible(eta_fn: SensitivityFunction, eta: np.ndarray, p1: np.ndarray, p0: np.ndarray) -> None:
    if np.any(eta >= 1.0):
        raise EtaIsOne()
    bound = np.asarray(eta_feasible_bound(p1, p0))
    viol = eta > bound + _FEAS_TOL
    if np.any(viol):
        frac = float(np.mean(viol))
        qtl = float(np.quantile(bound, 1.0 - frac))
        raise EtaInfeasibleAtSomeX(eta_fn.eta0, frac, qtl)


def make_eta_kernel_context(
    data: Dataset,
    bundle: NuisanceBundle,
    stratum: StratumId,
    contrast: ContrastFunction,
    eta_fn: SensitivityFunction,
    delta: float = 0.0,
    validate: bool = True,
) -> KernelContext:
    """Kernel context with eta-level stratum scores and per-unit scores.

    Mirrors the monotone construction term for term; all four strata are
    allowed here, with the defier stratum's cells (z=1, d=0) and (z=0, d=1).
    """
    if validate:
        validate_dataset(data)
    x = data.x
    z, d = np.asarray(data.z), np.asarray(data.d)
    pi = bundle.propensity.predict(x)
    p1 = bundle.intermediate.predict_p(1, x)
    p0 = bundle.intermediate.predict_p(0, x)
    eta = eta_fn.values(p1, p0)
    _check_eta_feasible(eta_fn, eta, p1, p0)
    scores = _floored_eta_scores(p1, p0, eta, delta)
    e_s = scores.for_stratum(stratum)
    psi1 = psi_dz_values(data, bundle.subset, 1)
    psi0 = psi_dz_values(data, bundle.subset, 0)
    cvec = _eta_unit_score(stratum, psi1, psi0, eta)
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
        meta={"delta": delta, "n_floored": scores.n_floored,
              "eta_form": eta_fn.form, "eta0": eta_fn.eta0},
    )


ALL_SENSITIVITY_STRATA = (StratumId.S10, StratumId.S01, StratumId.S00, StratumId.S11)


def sensitivity_estimate(
    data: Dataset,
    contrast: ContrastFunction,
    eta: SensitivityFunction,
    estimator: str = "tr",
    *,
    bundle: NuisanceBundle | None = None,
    nuisance: NuisanceSpec | None = None,
    strata: Sequence[StratumId] | None = None,
    delta: float = 0.0,
    k: int = 5,
    rng_seed: int | None = None,
    strategy: str = "auto",
    threads: int = 1,
) -> dict[StratumId, EstimateReport]:
    """Stratum estimates at sensitivity level eta, one report per stratum.

    ``estimator`` is "tr" (single-sample triply robust) or "dml"
    (cross-fitted). With eta identically zero the defier stratum has
    proportion zero and is omitted; the remaining reports then agree with
    the monotone triply robust output exactly.

    A supplied ``bundle`` is used as is (for "dml" it is injected into every
    block, which suits true-function bundles); otherwise nuisances are fit
    from ``nuisance``, for "tr" once on the full sample.
    """
    if estimator not in ("tr", "dml"):
        raise ValueError(f"estimator must be 'tr' or 'dml', got {estimator!r}")
    validate_dataset(data)
    if strata is None:
        strata = ALL_SENSITIVITY_STRATA
    strata = tuple(strata)
    if eta.is_zero:
        strata = tuple(s for s in strata if s is not StratumId.S01)
    out: dict[StratumId, EstimateReport] = {}
    if estimator == "tr":
        if bundle is None:
            spec = nuisance if nuisance is not None else NuisanceSpec()
            bundle = fit_nuisance_bundle(data, spec, contrast, strata=strata, rng_seed=rng_seed)
        for s in strata:
            ctx = make_eta_kernel_context(data, bundle, s, contrast, eta, delta, validate=False)
            rep = tr_estimate(data, ctx, strategy=strategy, threads=threads)
            rep.meta.update(eta_form=eta.form, eta0=eta.eta0, n_floored_eta=ctx.scores.n_floored)
            out[s] = rep
        return out

    def builder(data_, bundle_, stratum_, contrast_, delta_, validate=False):
        return make_eta_kernel_context(data_, bundle_, stratum_, contrast_, eta, delta_, validate=validate)

    for s in strata:

        def score_cf(bundle_k, psi1_all, psi0_all, _s=s):
            p1k = bundle_k.intermediate.predict_p(1, data.x)
            p0k = bundle_k.intermediate.predict_p(0, data.x)
            eta_k = eta.values(p1k, p0k)
            _check_eta_feasible(eta, eta_k, p1k, p0k)
            return _eta_unit_score(_s, psi1_all, psi0_all, eta_k)

        rep = dml_estimate(
            data,
            EstimandSpec(s, contrast),
            nuisance=nuisance,
            k=k,
            rng_seed=rng_seed,
            delta=delta,
            oracle_bundle=bundle,
            strategy=strategy,
            threads=threads,
            _context_builder=builder,
            _unit_score_cf=score_cf,
        )
        rep.meta.update(eta_form=eta.form, eta0=eta.eta0)
        out[s] = rep
    return out
