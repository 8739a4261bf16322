"""Command line front end.

Four subcommands: ``estimate`` (fit nuisances and run estimators on a CSV
dataset, optional bootstrap), ``simulate`` (replication scenarios from a JSON
config), ``sensitivity`` (estimates over a grid of monotonicity-violation
levels), and ``oracle`` (Monte Carlo ground truth for a built-in generator).

Run configuration can come from flags, from a JSON file with a versioned
``schema`` field, or both; explicit flags win over the file, the file wins
over defaults, and the resolved values are echoed back in the output
metadata so a run is reproducible from its own artifact.

Exit codes map error families, not individual exceptions: 2 configuration,
3 dataset validation, 4 nuisance fitting, 5 estimation, 6 sensitivity,
7 resampling or simulation, 1 anything unexpected.
"""

from __future__ import annotations

import json
import sys
from contextlib import contextmanager

import click
import numpy as np

from . import errors as E
from .core import (
    BUILTIN_CONTRASTS,
    Dataset,
    EstimandSpec,
    OutcomeKind,
    StratumId,
    Summary,
    component_names,
    contrast_by_name,
    read_csv_dataset,
    summarize_estimand,
    validate_dataset,
)
from .estimators import dml_estimate, make_kernel_context, plugin_estimate, tr_estimate
from .inference import attach_bootstrap, bootstrap_ci, estimator_closure, mc_oracle_truth
from .nuisance import LearnerSpec, NuisanceSpec, fit_nuisance_bundle, learner_kinds
from .sensitivity import ALL_SENSITIVITY_STRATA, SensitivityFunction, sensitivity_estimate
from .simulation import (
    DgpSpec,
    ScenarioSpec,
    run_scenario,
    write_aggregates_csv,
    write_replicates_csv,
)

CONFIG_SCHEMA = "principalpairs/1"

DEFAULTS = {
    "eps": 0.01,
    "delta": 0.0,
    "b": 1000,
    "level": 0.95,
    "k": 5,
    "seed": 0,
    "threads": 1,
    "strategy": "auto",
}

_ESTIMATOR_MODE = {"m1": "pi_p", "m2": "pi_mu", "m3": "p_mu", "tr": "tr", "dml": "dml"}

_EXIT_FAMILIES = (
    ((E.ConfigError,), 2),
    (
        (
            E.EmptyDataset,
            E.InvalidBinary,
            E.UndefinedOutcomeWithD1,
            E.DimensionMismatch,
            E.InvalidOrdinalOutcome,
        ),
        3,
    ),
    (
        (
            E.SeparationDetected,
            E.SingularInformation,
            E.NoConvergence,
            E.RankDeficientDesign,
            E.MissingCategory,
            E.NonmonotoneCutpoints,
            E.NonpositiveSigma,
            E.NotAProbabilityVector,
            E.EmptyCell,
            E.UnknownLearnerKind,
        ),
        4,
    ),
    (
        (
            E.DenominatorNearZero,
            E.BadK,
            E.StratumNotAllowed,
            E.UndefinedOutcome,
            E.ZeroLossProbability,
            E.UnsupportedContrast,
        ),
        5,
    ),
    ((E.EtaInfeasible, E.EtaIsOne, E.EtaInfeasibleAtSomeX), 6),
    ((E.TooManyFailedReplicates, E.EmptyStratum, E.SingularTransform), 7),
)


def _exit_code(err: E.PrincipalPairsError) -> int:
    for classes, code in _EXIT_FAMILIES:
        if isinstance(err, classes):
            return code
    return 1


@contextmanager
def _error_boundary():
    try:
        yield
    except E.PrincipalPairsError as err:
        click.echo(f"error: {type(err).__name__}: {err}", err=True)
        sys.exit(_exit_code(err))


@contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise E.ConfigError(f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise E.ConfigError(f"config {path} is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise E.ConfigError(f"config {path} must be a JSON object")
    schema = cfg.get("schema")
    if schema != CONFIG_SCHEMA:
        raise E.ConfigError(
            f"config {path}: schema must be {CONFIG_SCHEMA!r}, got {schema!r}"
        )
    return cfg


def _pick(flag, cfg_value, default):
    if flag is not None:
        return flag
    if cfg_value is not None:
        return cfg_value
    return default


def _csv_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _learner_from_config(entry) -> LearnerSpec:
    if entry is None:
        return LearnerSpec()
    if isinstance(entry, str):
        entry = {"kind": entry}
    if not isinstance(entry, dict):
        raise E.ConfigError(f"learner entry must be a name or object, got {entry!r}")
    kind = entry.get("kind", "parametric")
    if kind not in learner_kinds():
        raise E.ConfigError(f"unknown learner kind {kind!r}; known: {', '.join(learner_kinds())}")
    hp = entry.get("hyperparameters", {})
    if not isinstance(hp, dict):
        raise E.ConfigError("hyperparameters must be an object")
    return LearnerSpec(kind, hp)


def _nuisance_from_config(cfg: dict, eps: float, delta: float) -> NuisanceSpec:
    nu = cfg.get("nuisance", {})
    if not isinstance(nu, dict):
        raise E.ConfigError("nuisance section must be an object")
    return NuisanceSpec(
        propensity=_learner_from_config(nu.get("propensity")),
        intermediate=_learner_from_config(nu.get("intermediate")),
        outcome=_learner_from_config(nu.get("outcome")),
        eps=eps,
        delta=delta,
    )


def _outcome_kind(outcome: str, q: int | None, cfg: dict) -> OutcomeKind:
    oc = cfg.get("outcome", {})
    outcome = _pick(outcome, oc.get("kind") if isinstance(oc, dict) else None, "continuous")
    q = _pick(q, oc.get("q") if isinstance(oc, dict) else None, None)
    if outcome == "continuous":
        return OutcomeKind.continuous()
    if outcome == "ordinal":
        if q is None:
            raise E.ConfigError("ordinal outcome needs --q (number of categories)")
        return OutcomeKind.ordinal(int(q))
    raise E.ConfigError(f"unknown outcome kind {outcome!r}")


def _parse_strata(names: list[str], allow_defier: bool = False) -> list[StratumId]:
    out = []
    for s in names:
        try:
            st = StratumId(s)
        except ValueError:
            raise E.ConfigError(f"unknown stratum {s!r}; expected 10, 00, 11" + (", 01" if allow_defier else "")) from None
        if st is StratumId.S01 and not allow_defier:
            raise E.ConfigError(
                "stratum 01 is not estimable under monotonicity; use the sensitivity command"
            )
        out.append(st)
    return out


def _summary_enum(name: str) -> Summary:
    try:
        return Summary(name.replace("-", "_"))
    except ValueError:
        raise E.ConfigError(f"unknown summary {name!r}") from None


def _display(value: float, ci: tuple[float, float] | None) -> str:
    if ci is None:
        return f"{value:.3f}"
    return f"{value:.3f} ({ci[0]:.3f}, {ci[1]:.3f})"


@click.group()
def main() -> None:
    """Stratum-specific pairwise contrast estimation."""


_threads_option = click.option(
    "--threads",
    type=int,
    default=None,
    envvar="PRINCIPALPAIRS_THREADS",
    help="worker threads for pair sums and bootstrap (env PRINCIPALPAIRS_THREADS)",
)


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--outcome", type=click.Choice(["continuous", "ordinal"]), default=None)
@click.option("--q", type=int, default=None, help="ordinal category count")
@click.option("--contrast", "contrast_name", default=None, type=click.Choice(sorted(BUILTIN_CONTRASTS)))
@click.option("--summary", "summary_name", default=None, type=click.Choice(["raw", "win-ratio", "win-difference"]))
@click.option("--stratum", "strata_arg", default=None, help="comma list from 10,00,11")
@click.option("--estimator", "estimators_arg", default=None, help="comma list from m1,m2,m3,tr,dml")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--bootstrap/--no-bootstrap", default=None)
@click.option("--b", type=int, default=None, help="bootstrap replicates")
@click.option("--level", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None, help="cross-fitting folds for dml")
@click.option("--eps", type=float, default=None)
@click.option("--delta", type=float, default=None)
@click.option("--strategy", type=click.Choice(["auto", "factored", "tiled"]), default=None)
@_threads_option
@click.option("--output", default="-", help="output path or - for stdout")
def estimate(
    data_path,
    outcome,
    q,
    contrast_name,
    summary_name,
    strata_arg,
    estimators_arg,
    config_path,
    bootstrap,
    b,
    level,
    seed,
    k,
    eps,
    delta,
    strategy,
    threads,
    output,
) -> None:
    """Estimate stratum contrasts from a CSV dataset (columns x1..xp, z, d, y;
    blank y means undefined)."""
    with _error_boundary():
        cfg = _load_config(config_path)
        eps = float(_pick(eps, cfg.get("eps"), DEFAULTS["eps"]))
        delta = float(_pick(delta, cfg.get("delta"), DEFAULTS["delta"]))
        b = int(_pick(b, cfg.get("b"), DEFAULTS["b"]))
        level = float(_pick(level, cfg.get("level"), DEFAULTS["level"]))
        seed = int(_pick(seed, cfg.get("seed"), DEFAULTS["seed"]))
        k = int(_pick(k, cfg.get("k"), DEFAULTS["k"]))
        threads = int(_pick(threads, cfg.get("threads"), DEFAULTS["threads"]))
        strategy = _pick(strategy, cfg.get("strategy"), DEFAULTS["strategy"])
        do_boot = bool(_pick(bootstrap, cfg.get("bootstrap"), False))
        contrast_name = _pick(contrast_name, cfg.get("contrast"), "difference")
        summary_name = _pick(summary_name, cfg.get("summary"), "raw")
        strata_names = _csv_list(_pick(strata_arg, cfg.get("strata"), "10"))
        est_names = _csv_list(_pick(estimators_arg, cfg.get("estimator"), "tr"))

        kind = _outcome_kind(outcome, q, cfg)
        data = validate_dataset(read_csv_dataset(data_path, kind))
        contrast = contrast_by_name(contrast_name)
        summary = _summary_enum(summary_name)
        strata = _parse_strata(strata_names)
        for e in est_names:
            if e not in _ESTIMATOR_MODE:
                raise E.ConfigError(f"unknown estimator {e!r}; known: {', '.join(_ESTIMATOR_MODE)}")
        try:
            specs = {st: EstimandSpec(st, contrast, summary) for st in strata}
        except ValueError as err:
            raise E.ConfigError(str(err)) from None
        nspec = _nuisance_from_config(cfg, eps, delta)
        refold = bool(cfg.get("refold", True))

        needs_bundle = any(e != "dml" for e in est_names)
        bundle = None
        contexts = {}
        if needs_bundle:
            bundle = fit_nuisance_bundle(data, nspec, contrast, strata=tuple(strata), rng_seed=seed)
            contexts = {
                st: make_kernel_context(data, bundle, st, contrast, delta, validate=False)
                for st in strata
            }

        results = []
        combo = 0
        for est in est_names:
            mode = _ESTIMATOR_MODE[est]
            for st in strata:
                if mode == "dml":
                    rep = dml_estimate(
                        data, specs[st], nuisance=nspec, k=k, rng_seed=seed,
                        delta=delta, strategy=strategy, threads=threads,
                    )
                elif mode == "tr":
                    rep = tr_estimate(data, contexts[st], strategy, threads)
                else:
                    rep = plugin_estimate(data, contexts[st], mode, strategy, threads)
                rep.summary_value = summarize_estimand(specs[st], rep.point)
                if do_boot:
                    boot_seed = int(np.random.SeedSequence(seed, spawn_key=(combo,)).generate_state(1)[0])
                    closure = estimator_closure(
                        mode, specs[st], nspec, k=k, refold=refold,
                        base_seed=seed, strategy=strategy,
                    )
                    boot = bootstrap_ci(data, closure, b, level, rng_seed=boot_seed, threads=threads)
                    attach_bootstrap(rep, specs[st], boot)
                combo += 1
                entry = {
                    "estimator": est,
                    "stratum": st.value,
                    "components": list(component_names(contrast)),
                    "point": [float(v) for v in rep.point],
                    "numerator": [float(v) for v in rep.numerator],
                    "denominator": float(rep.denominator),
                    "summary": {
                        "kind": summary.value,
                        "value": rep.summary_value,
                        "se": rep.summary_se,
                        "ci": list(rep.summary_ci) if rep.summary_ci else None,
                    },
                    "display": _display(rep.summary_value, rep.summary_ci),
                    "meta": {
                        key: val for key, val in rep.meta.items()
                        if isinstance(val, (int, float, str, bool, list, dict, type(None)))
                    },
                }
                if rep.se is not None:
                    entry["se"] = [float(v) for v in rep.se]
                    entry["ci"] = [[float(a), float(bv)] for a, bv in rep.ci]
                results.append(entry)

        doc = {
            "schema": "principalpairs.estimate/1",
            "metadata": {
                "data": data_path,
                "n": data.n,
                "p": data.p,
                "outcome": kind.kind,
                "q": kind.q,
                "contrast": contrast_name,
                "summary": summary.value,
                "estimators": est_names,
                "strata": [st.value for st in strata],
                "eps": eps,
                "delta": delta,
                "bootstrap": do_boot,
                "b": b,
                "level": level,
                "k": k,
                "seed": seed,
                "threads": threads,
                "strategy": strategy,
            },
            "results": results,
        }
        with _open_out(output) as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="override every scenario's seed")
@click.option("--output", default="-", help="replicate CSV path or - for stdout")
@click.option("--aggregates", "agg_path", default=None, help="also write aggregate CSV here")
def simulate(config_path, seed, output, agg_path) -> None:
    """Run replication scenarios from a JSON config."""
    with _error_boundary():
        cfg = _load_config(config_path)
        raw_scenarios = cfg.get("scenarios")
        if not isinstance(raw_scenarios, list) or not raw_scenarios:
            raise E.ConfigError("config needs a nonempty 'scenarios' array")
        specs = []
        for i, entry in enumerate(raw_scenarios):
            if not isinstance(entry, dict):
                raise E.ConfigError(f"scenario {i} must be an object")
            entry = dict(entry)
            dgp_entry = entry.pop("dgp", {})
            if isinstance(dgp_entry, str):
                dgp_entry = {"kind": dgp_entry}
            if not isinstance(dgp_entry, dict):
                raise E.ConfigError(f"scenario {i}: dgp must be a name or object")
            try:
                dgp = DgpSpec(**dgp_entry)
            except TypeError as err:
                raise E.ConfigError(f"scenario {i}: bad dgp field: {err}") from None
            for key in ("estimators", "strata"):
                if key in entry:
                    entry[key] = tuple(_csv_list(entry[key]))
            if seed is not None:
                entry["seed"] = seed
            try:
                specs.append(ScenarioSpec(dgp=dgp, **entry))
            except TypeError as err:
                raise E.ConfigError(f"scenario {i}: bad field: {err}") from None
        all_rows = []
        all_aggs = []
        for spec in specs:
            result = run_scenario(spec)
            all_rows.extend(result.rows)
            all_aggs.extend(result.aggregates)
        with _open_out(output) as fh:
            write_replicates_csv(fh, all_rows)
        if agg_path is not None:
            with _open_out(agg_path) as fh:
                write_aggregates_csv(fh, all_aggs)


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--outcome", type=click.Choice(["continuous", "ordinal"]), default=None)
@click.option("--q", type=int, default=None)
@click.option("--contrast", "contrast_name", default=None, type=click.Choice(sorted(BUILTIN_CONTRASTS)))
@click.option("--estimator", "estimator", default="tr", type=click.Choice(["tr", "dml"]))
@click.option("--form", default="constant", type=click.Choice(["constant", "proportional"]))
@click.option("--eta0", "eta0_arg", default="0.1,0.2,0.3,0.4,0.5", help="comma list of levels")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--bootstrap/--no-bootstrap", default=None)
@click.option("--b", type=int, default=None)
@click.option("--level", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--eps", type=float, default=None)
@click.option("--delta", type=float, default=None)
@_threads_option
@click.option("--output", default="-")
def sensitivity(
    data_path,
    outcome,
    q,
    contrast_name,
    estimator,
    form,
    eta0_arg,
    config_path,
    bootstrap,
    b,
    level,
    seed,
    k,
    eps,
    delta,
    threads,
    output,
) -> None:
    """Stratum estimates across monotonicity-violation levels; eta0 = 0
    reproduces the monotone triply robust estimates."""
    with _error_boundary():
        cfg = _load_config(config_path)
        eps = float(_pick(eps, cfg.get("eps"), DEFAULTS["eps"]))
        delta = float(_pick(delta, cfg.get("delta"), DEFAULTS["delta"]))
        b = int(_pick(b, cfg.get("b"), DEFAULTS["b"]))
        level = float(_pick(level, cfg.get("level"), DEFAULTS["level"]))
        seed = int(_pick(seed, cfg.get("seed"), DEFAULTS["seed"]))
        k = int(_pick(k, cfg.get("k"), DEFAULTS["k"]))
        threads = int(_pick(threads, cfg.get("threads"), DEFAULTS["threads"]))
        do_boot = bool(_pick(bootstrap, cfg.get("bootstrap"), False))
        contrast_name = _pick(contrast_name, cfg.get("contrast"), "difference")

        kind = _outcome_kind(outcome, q, cfg)
        data = validate_dataset(read_csv_dataset(data_path, kind))
        contrast = contrast_by_name(contrast_name)
        nspec = _nuisance_from_config(cfg, eps, delta)
        try:
            grid = [float(v) for v in _csv_list(eta0_arg)]
        except ValueError:
            raise E.ConfigError(f"cannot parse eta0 grid {eta0_arg!r}") from None
        if not grid:
            raise E.ConfigError("eta0 grid is empty")

        bundle = None
        if estimator == "tr":
            need = ALL_SENSITIVITY_STRATA if any(v > 0 for v in grid) else tuple(
                s for s in ALL_SENSITIVITY_STRATA if s is not StratumId.S01
            )
            bundle = fit_nuisance_bundle(data, nspec, contrast, strata=need, rng_seed=seed)

        comp = component_names(contrast)
        lines = ["stratum,eta0,component,estimate,se,ci_lo,ci_hi"]
        for gi, eta0 in enumerate(grid):
            eta_fn = SensitivityFunction(form, eta0)
            reports = sensitivity_estimate(
                data, contrast, eta_fn, estimator,
                bundle=bundle, nuisance=nspec, delta=delta, k=k,
                rng_seed=seed, threads=threads,
            )
            boots = {}
            if do_boot:
                for st in reports:
                    def closure(data_, seed_, _st=st, _eta=eta_fn):
                        return sensitivity_estimate(
                            data_, contrast, _eta, estimator,
                            nuisance=nspec, strata=(_st,), delta=delta, k=k,
                            rng_seed=seed_,
                        )[_st].point

                    boot_seed = int(
                        np.random.SeedSequence(seed, spawn_key=(gi, hash(st.value) & 0xFFFF)).generate_state(1)[0]
                    )
                    boots[st] = bootstrap_ci(data, closure, b, level, rng_seed=boot_seed, threads=threads)
            for st, rep in reports.items():
                boot = boots.get(st)
                for ci_idx, cname in enumerate(comp):
                    se_s = f"{boot.se[ci_idx]:.10g}" if boot else ""
                    lo_s = f"{boot.ci[ci_idx, 0]:.10g}" if boot else ""
                    hi_s = f"{boot.ci[ci_idx, 1]:.10g}" if boot else ""
                    lines.append(
                        f"{st.value},{eta0:g},{cname},{rep.point[ci_idx]:.10g},{se_s},{lo_s},{hi_s}"
                    )
        with _open_out(output) as fh:
            fh.write("\n".join(lines) + "\n")


@main.command()
@click.option("--dgp", "dgp_kind", default="gaussian", type=click.Choice(["gaussian", "ordinal"]))
@click.option("--eta0", type=float, default=0.0)
@click.option("--y-cov-scale", type=float, default=1.0)
@click.option("--stratum", "stratum_name", default="10")
@click.option("--contrast", "contrast_name", default="difference", type=click.Choice(sorted(BUILTIN_CONTRASTS)))
@click.option("--draws", type=int, default=1_000_000)
@click.option("--seed", type=int, default=0)
@click.option("--target-se", type=float, default=1e-3)
@click.option("--output", default="-")
def oracle(dgp_kind, eta0, y_cov_scale, stratum_name, contrast_name, draws, seed, target_se, output) -> None:
    """Monte Carlo ground truth of a stratum contrast under a built-in
    generator."""
    with _error_boundary():
        dgp = DgpSpec(dgp_kind, eta0, y_cov_scale)
        strata = _parse_strata(_csv_list(stratum_name), allow_defier=True)
        contrast = contrast_by_name(contrast_name)
        out = []
        for st in strata:
            truth = mc_oracle_truth(
                dgp, EstimandSpec(st, contrast), draws=draws, rng_seed=seed, target_se=target_se
            )
            out.append(
                {
                    "stratum": st.value,
                    "components": list(component_names(contrast)),
                    "value": [float(v) for v in truth.value],
                    "se": [float(v) for v in truth.se],
                    "n_stratum": truth.n_stratum,
                    "draws": truth.draws,
                    "method": truth.method,
                    "rounds": truth.rounds,
                }
            )
        doc = {
            "schema": "principalpairs.oracle/1",
            "metadata": {
                "dgp": dgp_kind,
                "eta0": eta0,
                "y_cov_scale": y_cov_scale,
                "contrast": contrast_name,
                "draws": draws,
                "seed": seed,
                "target_se": target_se,
            },
            "results": out,
        }
        with _open_out(output) as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
