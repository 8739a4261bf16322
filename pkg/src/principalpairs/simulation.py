"""Synthetic data generators and the replication harness.

Two data-generating processes, both with four covariates (three standard
normal, one Bernoulli(1/2)) and a logistic treatment assignment:

  gaussian  binary intermediate from a shared-uniform pair of logistic arms,
            a Gaussian outcome whose mean shifts with treatment, intermediate
            status, and (scaled by ``y_cov_scale``) the covariates
  ordinal   the same assignment and intermediate, a three-category outcome
            from a cumulative-logit model with shared cutpoints

The intermediate's two potential values are coupled through a single uniform
draw, so at ``eta0 = 0`` no unit ever has it switched off by treatment. With
``eta0 > 0`` the stratum label is drawn from the four-way score quadruple at
eta(X) proportional to the feasibility bound, which keeps both margins equal
to the logistic arms while introducing defiers.

Model misspecification in experiments is always the same device: the nuisance
component is fit on a fixed nonlinear distortion of the covariates
(``transform_covariates``) instead of the covariates themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .core import (
    ContrastFunction,
    Dataset,
    OutcomeKind,
    StratumId,
    component_names,
    contrast_by_name,
)
from .errors import ConfigError, SingularTransform
from .estimators import (
    PLUGIN_MODES,
    dml_estimate,
    make_kernel_context,
    plugin_estimate,
    tr_estimate,
)
from .nuisance import (
    IntermediateModel,
    NuisanceBundle,
    NuisanceSpec,
    PairwiseMeanModel,
    PropensityModel,
    fit_nuisance_bundle,
)
from .sensitivity import eta_feasible_bound, eta_principal_scores

__all__ = [
    "DgpSpec",
    "PotentialTable",
    "gen_dgp",
    "gen_dgp_gaussian",
    "gen_dgp_ordinal",
    "transform_covariates",
    "true_propensity",
    "true_pz",
    "true_outcome_mean",
    "true_ordinal_probs",
    "oracle_nuisance_bundle",
    "oracle_marginal_pz",
    "ScenarioSpec",
    "ScenarioResult",
    "run_scenario",
    "write_replicates_csv",
    "write_aggregates_csv",
]


# ---------------------------------------------------------------------------
# true model functions

_Z_COEF = np.array([-1.0, 0.5, -0.25, -0.1])
_D_COEF = np.array([1.0, -0.8, 0.6, -1.0])
_Y_COEF = np.array([8.0, 6.0, 9.0, 7.0])
_ORD_COEF = np.array([1.0, -1.0, 1.2, -0.8])
_ORD_CUTS = (-1.0, 1.0)
ORDINAL_Q = 3


def true_propensity(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=float) @ _Z_COEF)


def true_pz(z: int, x: np.ndarray) -> np.ndarray:
    return expit(-1.0 + 2.0 * z + np.asarray(x, dtype=float) @ _D_COEF)


def true_outcome_mean(z: int, d, x: np.ndarray, y_cov_scale: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 10.0 + 2.0 * z - np.asarray(d, dtype=float) + y_cov_scale * (x @ _Y_COEF)


def true_ordinal_probs(z: int, d, x: np.ndarray) -> np.ndarray:
    """Category probabilities (n, 3) of the cumulative-logit outcome."""
    x = np.asarray(x, dtype=float)
    lp = 2.0 * z - np.asarray(d, dtype=float) + x @ _ORD_COEF
    cum = expit(np.asarray(_ORD_CUTS)[None, :] + lp[:, None])
    padded = np.concatenate(
        [np.zeros((x.shape[0], 1)), cum, np.ones((x.shape[0], 1))], axis=1
    )
    return np.diff(padded, axis=1)


def transform_covariates(x: np.ndarray) -> np.ndarray:
    """The fixed nonlinear covariate distortion used to misspecify models."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    if np.any(np.abs(1.0 + xx[:, 0]) < 1e-8):
        raise SingularTransform()
    out = np.column_stack(
        [
            np.exp(0.5 * xx[:, 0]),
            xx[:, 1] / (1.0 + xx[:, 0]),
            (xx[:, 1] * xx[:, 2] / 25.0 + 0.6) ** 3,
            xx[:, 2] * xx[:, 3] / math.sqrt(2.0),
        ]
    )
    return out[0] if single else out


# ---------------------------------------------------------------------------
# data generation


@dataclass(frozen=True)
class DgpSpec:
    """Which generator, its monotonicity violation level, and the covariate
    scale in the Gaussian outcome (0 gives the covariate-free variant)."""

    kind: str = "gaussian"
    eta0: float = 0.0
    y_cov_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "ordinal"):
            raise ConfigError(f"unknown dgp kind {self.kind!r}")
        if not 0.0 <= self.eta0 < 1.0:
            raise ConfigError(f"dgp eta0 must be in [0, 1), got {self.eta0!r}")
        if self.kind == "ordinal" and self.eta0 != 0.0:
            raise ConfigError("the ordinal dgp is defined under monotonicity only")


@dataclass
class PotentialTable:
    """Both potential intermediates and outcomes for every simulated unit."""

    x: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray

    def stratum_mask(self, stratum: StratumId) -> np.ndarray:
        a, b = int(stratum.value[0]), int(stratum.value[1])
        return (self.d1 == a) & (self.d0 == b)


def _covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x123 = rng.standard_normal((n, 3))
    x4 = (rng.random(n) < 0.5).astype(float)
    return np.column_stack([x123, x4])


def _intermediate_potentials(rng, x, eta0):
    p1 = true_pz(1, x)
    p0 = true_pz(0, x)
    u = rng.random(x.shape[0])
    if eta0 == 0.0:
        return (u < p1).astype(np.int8), (u < p0).astype(np.int8)
    eta = eta0 * eta_feasible_bound(p1, p0)
    e10, e01, _e00, e11 = eta_principal_scores(p1, p0, eta, check=False)
    t11 = e11
    t10 = t11 + e10
    t01 = t10 + e01
    d1 = (u < t10).astype(np.int8)  # strata 11 and 10 have d(1) = 1
    d0 = ((u < t11) | ((u >= t10) & (u < t01))).astype(np.int8)  # 11 and 01
    return d1, d0


def gen_dgp_gaussian(
    n: int,
    rng_seed: int | None,
    eta0: float = 0.0,
    y_cov_scale: float = 1.0,
) -> tuple[Dataset, PotentialTable]:
    """Draw a Gaussian-outcome sample; the draw order (covariates, treatment,
    intermediate coupling uniform, outcome noises) is part of the contract so
    seeded runs are reproducible across versions."""
    rng = np.random.default_rng(rng_seed)
    x = _covariates(rng, n)
    z = (rng.random(n) < true_propensity(x)).astype(np.int8)
    d1, d0 = _intermediate_potentials(rng, x, eta0)
    noise1 = rng.standard_normal(n)
    noise0 = rng.standard_normal(n)
    y1 = true_outcome_mean(1, d1, x, y_cov_scale) + noise1
    y0 = true_outcome_mean(0, d0, x, y_cov_scale) + noise0
    d = np.where(z == 1, d1, d0)
    y = np.where(z == 1, y1, y0)
    data = Dataset(x, z, d, y, OutcomeKind.continuous())
    return data, PotentialTable(x, d1, d0, y1, y0)


def _ordinal_draw(v: np.ndarray, d, x: np.ndarray, z: int) -> np.ndarray:
    lp = 2.0 * z - np.asarray(d, dtype=float) + x @ _ORD_COEF
    cat = np.ones(x.shape[0])
    for cut in _ORD_CUTS:
        cat += v > expit(cut + lp)
    return cat


def gen_dgp_ordinal(n: int, rng_seed: int | None) -> tuple[Dataset, PotentialTable]:
    """Three-category cumulative-logit outcome over the same assignment and
    intermediate design; one uniform per unit drives the category under both
    arms."""
    rng = np.random.default_rng(rng_seed)
    x = _covariates(rng, n)
    z = (rng.random(n) < true_propensity(x)).astype(np.int8)
    d1, d0 = _intermediate_potentials(rng, x, 0.0)
    v = rng.random(n)
    y1 = _ordinal_draw(v, d1, x, 1)
    y0 = _ordinal_draw(v, d0, x, 0)
    d = np.where(z == 1, d1, d0)
    y = np.where(z == 1, y1, y0)
    data = Dataset(x, z, d, y, OutcomeKind.ordinal(ORDINAL_Q))
    return data, PotentialTable(x, d1, d0, y1, y0)


def gen_dgp(spec: DgpSpec, n: int, rng_seed: int | None) -> tuple[Dataset, PotentialTable]:
    if spec.kind == "gaussian":
        return gen_dgp_gaussian(n, rng_seed, spec.eta0, spec.y_cov_scale)
    return gen_dgp_ordinal(n, rng_seed)


# ---------------------------------------------------------------------------
# oracle nuisances (true functions injected, no fitting, no clipping)

_ALL_CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


def oracle_nuisance_bundle(dgp: DgpSpec, contrast: ContrastFunction) -> NuisanceBundle:
    propensity = PropensityModel.from_function(true_propensity, eps=0.0)
    intermediate = IntermediateModel.from_functions(
        lambda x: true_pz(1, x), lambda x: true_pz(0, x), eps=0.0
    )
    if dgp.kind == "gaussian":
        scale = dgp.y_cov_scale
        cells = {
            (z, d): (lambda xx, z=z, d=d: true_outcome_mean(z, d, xx, scale))
            for (z, d) in _ALL_CELLS
        }
        mu = PairwiseMeanModel("gaussian", contrast, cells, sigma=1.0)
    else:
        cells = {
            (z, d): (lambda xx, z=z, d=d: true_ordinal_probs(z, d, xx))
            for (z, d) in _ALL_CELLS
        }
        mu = PairwiseMeanModel("ordinal", contrast, cells, q=ORDINAL_Q)
    return NuisanceBundle(propensity, intermediate, mu, meta={"oracle": True})


def oracle_marginal_pz(dgp: DgpSpec, z: int, draws: int = 1_000_000, rng_seed: int | None = 0) -> float:
    """Monte Carlo E[p_z(X)], the population rate of the intermediate under
    arm z (the target of the doubly robust rate estimator)."""
    rng = np.random.default_rng(rng_seed)
    x = _covariates(rng, draws)
    return float(np.mean(true_pz(z, x)))


# ---------------------------------------------------------------------------
# scenario harness


def scenario_label(tp: bool, ps: bool, oc: bool) -> str:
    parts = [name for name, ok in (("tp", tp), ("ps", ps), ("oc", oc)) if ok]
    return "+".join(parts) if parts else "none"


def misspecified_nuisance(
    tp: bool, ps: bool, oc: bool, eps: float = 0.01, delta: float = 0.0
) -> NuisanceSpec:
    """Nuisance spec whose incorrect components (flag False) are fit on the
    distorted covariates."""
    wrong: Callable[[np.ndarray], np.ndarray] = transform_covariates
    return NuisanceSpec(
        propensity_features=None if tp else wrong,
        intermediate_features=None if ps else wrong,
        outcome_features=None if oc else wrong,
        eps=eps,
        delta=delta,
    )


_ESTIMATORS = ("m1", "m2", "m3", "tr", "dml")
_PLUGIN_OF = {"m1": "pi_p", "m2": "pi_mu", "m3": "p_mu"}


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of a replication experiment: a generator, which nuisance
    components are correctly specified, and which estimators to run."""

    dgp: DgpSpec = field(default_factory=DgpSpec)
    tp: bool = True
    ps: bool = True
    oc: bool = True
    n: int = 2000
    reps: int = 10
    estimators: tuple[str, ...] = ("tr",)
    strata: tuple[str, ...] = ("10",)
    contrast: str = "geq"
    seed: int = 0
    k: int = 5
    eps: float = 0.01
    delta: float = 0.0
    oracle_draws: int = 1_000_000
    compute_truth: bool = True

    def __post_init__(self) -> None:
        for e in self.estimators:
            if e not in _ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}; known: {', '.join(_ESTIMATORS)}")
        for s in self.strata:
            if s not in ("10", "00", "11"):
                raise ConfigError(f"stratum {s!r} not estimable under monotonicity")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")

    @property
    def label(self) -> str:
        return scenario_label(self.tp, self.ps, self.oc)


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    rows: list[dict]
    aggregates: list[dict]
    truths: dict


def _replicate_seeds(seed: int, r: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(seed, spawn_key=(r,))
    a, b = ss.generate_state(2)
    return int(a), int(b)


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    """Run every replicate of one scenario and aggregate.

    Per-replicate rows carry (estimator, stratum, scenario, replicate,
    component, estimate); aggregates add mean, bias against the Monte Carlo
    oracle truth, SD, Monte Carlo standard error, and RMSE. Replicate r of a
    scenario always sees the same data across scenario variants run with the
    same seed, so specification comparisons are paired.
    """
    contrast = contrast_by_name(spec.contrast)
    comp_names = component_names(contrast)
    strata = [StratumId(s) for s in spec.strata]
    nspec = misspecified_nuisance(spec.tp, spec.ps, spec.oc, spec.eps, spec.delta)
    truths: dict = {}
    if spec.compute_truth:
        from .inference import mc_oracle_truth
        from .core import EstimandSpec

        for st in strata:
            truths[st.value] = mc_oracle_truth(
                spec.dgp,
                EstimandSpec(st, contrast),
                draws=spec.oracle_draws,
                rng_seed=spec.seed,
            )
    rows: list[dict] = []
    needs_bundle = any(e != "dml" for e in spec.estimators)
    for r in range(spec.reps):
        data_seed, aux_seed = _replicate_seeds(spec.seed, r)
        data, _table = gen_dgp(spec.dgp, spec.n, data_seed)
        bundle = None
        if needs_bundle:
            bundle = fit_nuisance_bundle(
                data, nspec, contrast, strata=tuple(strata), rng_seed=aux_seed
            )
        for st in strata:
            ctx = None
            if bundle is not None:
                ctx = make_kernel_context(data, bundle, st, contrast, nspec.delta, validate=False)
            for est in spec.estimators:
                if est == "dml":
                    from .core import EstimandSpec

                    rep = dml_estimate(
                        data,
                        EstimandSpec(st, contrast),
                        nuisance=nspec,
                        k=spec.k,
                        rng_seed=aux_seed,
                    )
                elif est == "tr":
                    rep = tr_estimate(data, ctx)
                else:
                    rep = plugin_estimate(data, ctx, _PLUGIN_OF[est])
                for ci, comp in enumerate(comp_names):
                    rows.append(
                        {
                            "estimator": est,
                            "stratum": st.value,
                            "scenario": spec.label,
                            "replicate": r,
                            "component": comp,
                            "estimate": float(rep.point[ci]),
                        }
                    )
    aggregates = _aggregate(rows, truths, comp_names, spec.label)
    return ScenarioResult(spec, rows, aggregates, truths)


def _aggregate(rows: list[dict], truths: dict, comp_names: Sequence[str], label: str) -> list[dict]:
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["estimator"], row["stratum"], row["component"]), []).append(
            row["estimate"]
        )
    out = []
    for (est, st, comp), vals in groups.items():
        arr = np.asarray(vals)
        mean = float(arr.mean())
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        entry = {
            "estimator": est,
            "stratum": st,
            "scenario": label,
            "component": comp,
            "n_reps": int(arr.size),
            "mean": mean,
            "sd": sd,
            "mc_se": sd / math.sqrt(arr.size) if arr.size > 1 else float("nan"),
        }
        truth = truths.get(st)
        if truth is not None:
            tv = float(truth.value[comp_names.index(comp)])
            entry["truth"] = tv
            entry["truth_se"] = float(truth.se[comp_names.index(comp)])
            entry["bias"] = mean - tv
            entry["rmse"] = float(np.sqrt(np.mean((arr - tv) ** 2)))
        out.append(entry)
    return out


_REPLICATE_FIELDS = ("estimator", "stratum", "scenario", "replicate", "component", "estimate")


def write_replicates_csv(fh, rows: Sequence[dict]) -> None:
    fh.write(",".join(_REPLICATE_FIELDS) + "\n")
    for row in rows:
        fh.write(
            ",".join(
                f"{row[k]:.10g}" if k == "estimate" else str(row[k]) for k in _REPLICATE_FIELDS
            )
            + "\n"
        )


def write_aggregates_csv(fh, aggregates: Sequence[dict]) -> None:
    fields = ("estimator", "stratum", "scenario", "component", "n_reps",
              "mean", "sd", "mc_se", "truth", "truth_se", "bias", "rmse")
    fh.write(",".join(fields) + "\n")
    for row in aggregates:
        cells = []
        for k in fields:
            v = row.get(k, "")
            cells.append(f"{v:.10g}" if isinstance(v, float) else str(v))
        fh.write(",".join(cells) + "\n")
