"""Acceptance gate: one test per stated requirement, each recording a
PASS/FAIL line on the terminal status board before asserting."""

import math
import os
import time

import numpy as np
import pytest
from scipy.special import ndtr

import cases
import oracles
from principalpairs import (
    DIFFERENCE,
    GEQ_INDICATOR,
    WIN_PAIR,
    EstimandSpec,
    NuisanceSpec,
    StratumId,
    bootstrap_ci,
    dml_estimate,
    estimator_closure,
    fit_nuisance_bundle,
    make_kernel_context,
    mc_oracle_truth,
    partition_pairs,
    plugin_estimate,
    tr_estimate,
)
from principalpairs.cli import _display
from principalpairs.estimators import estimate_pz_dr
from principalpairs.sensitivity import (
    SensitivityFunction,
    eta_principal_scores,
    sensitivity_estimate,
)
from principalpairs.simulation import (
    DgpSpec,
    ScenarioSpec,
    gen_dgp_gaussian,
    misspecified_nuisance,
    oracle_marginal_pz,
    oracle_nuisance_bundle,
    run_scenario,
)

MONOTONE_STRATA = (StratumId.S10, StratumId.S00, StratumId.S11)


def cached_truth(cache, dgp, stratum, contrast, draws=1_000_000, seed=0):
    key = (dgp.kind, dgp.eta0, dgp.y_cov_scale, stratum.value, contrast.name, draws, seed)
    if key not in cache:
        cache[key] = mc_oracle_truth(
            dgp, EstimandSpec(stratum, contrast), draws=draws, rng_seed=seed
        )
    return cache[key]


def scenario_means(result, estimator):
    vals = np.array(
        [r["estimate"] for r in result.rows if r["estimator"] == estimator]
    )
    comp = [r["component"] for r in result.rows if r["estimator"] == estimator]
    names = list(dict.fromkeys(comp))
    out = {}
    for name in names:
        arr = np.array([v for v, c in zip(vals, comp) if c == name])
        out[name] = (float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size)))
    return out


def test_c01_partition_layout(criterion):
    best = math.inf
    for _ in range(5):
        t0 = time.perf_counter()
        pp = partition_pairs(10, 3)
        best = min(best, time.perf_counter() - t0)
    sizes = tuple(len(f) for f in pp.folds)
    seen = set()
    for l in range(pp.n_blocks):
        seen |= {tuple(p) for p in pp.block_pairs(l)}
    off = pp.block_folds.index((0, 1))
    diag = pp.block_folds.index((0, 0))
    checks = {
        "sizes": sizes == (3, 4, 3),
        "blocks": pp.n_blocks == 6,
        "cover": seen == {(i, j) for i in range(10) for j in range(i + 1, 10)},
        "off_block": len(pp.block_pairs(off)) == 12,
        "diag_block": {tuple(p) for p in pp.block_pairs(diag)} == {(0, 1), (0, 2), (1, 2)},
        "fast": best < 1e-3,
    }
    passed = all(checks.values())
    criterion("c01", passed, f"{best * 1e6:.0f}us, sizes {sizes}")
    assert passed, checks


def test_c02_stratum_truth_recovery(criterion):
    reps, n = 200, 2000
    truths = {StratumId.S10: 1.0, StratumId.S00: 2.0, StratumId.S11: 2.0}
    got = {(e, st): [] for e in ("tr", "dml") for st in MONOTONE_STRATA}
    t0 = time.perf_counter()
    for r in range(reps):
        data, _ = gen_dgp_gaussian(n, 1000 + r)
        bundle = fit_nuisance_bundle(
            data, NuisanceSpec(), DIFFERENCE, strata=MONOTONE_STRATA, rng_seed=2000 + r
        )
        for st in MONOTONE_STRATA:
            ctx = make_kernel_context(data, bundle, st, DIFFERENCE)
            got[("tr", st)].append(float(tr_estimate(data, ctx).point[0]))
            got[("dml", st)].append(
                float(
                    dml_estimate(
                        data, EstimandSpec(st, DIFFERENCE), k=5, rng_seed=2000 + r
                    ).point[0]
                )
            )
    elapsed = time.perf_counter() - t0
    worst = 0.0
    ok = True
    for (est, st), vals in got.items():
        arr = np.array(vals)
        dev = abs(arr.mean() - truths[st])
        tol = max(2 * arr.std(ddof=1) / math.sqrt(reps), 0.05)
        worst = max(worst, dev / tol)
        ok = ok and dev <= tol
    if os.cpu_count() and os.cpu_count() >= 8:
        ok = ok and elapsed < 600
    criterion("c02", ok, f"worst dev/tol {worst:.2f}, {elapsed:.0f}s")
    assert ok


def test_c03_survivor_index_single_estimate(criterion):
    data, _ = gen_dgp_gaussian(4000, 1, y_cov_scale=0.0)
    bundle = fit_nuisance_bundle(
        data, NuisanceSpec(), GEQ_INDICATOR, strata=(StratumId.S11,), rng_seed=1
    )
    ctx = make_kernel_context(data, bundle, StratumId.S11, GEQ_INDICATOR)
    est = float(tr_estimate(data, ctx).point[0])
    target = float(ndtr(math.sqrt(2.0)))
    err = est - target
    ok = abs(err) < 0.01
    criterion("c03", ok, f"est {est:.5f}, target {target:.5f}, err {err:+.5f}")
    assert ok


def test_c04_misspecification_grid_continuous(criterion, truth_cache):
    dgp = DgpSpec(kind="gaussian")
    truth = float(cached_truth(truth_cache, dgp, StratumId.S10, GEQ_INDICATOR).value[0])
    scenarios = {
        "all": (True, True, True),
        "tp": (False, True, True),
        "ps": (True, False, True),
        "oc": (True, True, False),
    }
    needed = {"tp": ("m1", "m2"), "ps": ("m1", "m3"), "oc": ("m2", "m3")}
    stats = {}
    for name, (tp, ps, oc) in scenarios.items():
        res = run_scenario(
            ScenarioSpec(
                dgp=dgp, tp=tp, ps=ps, oc=oc, n=2000, reps=200,
                estimators=("m1", "m2", "m3", "tr"), strata=("10",),
                contrast="geq", seed=7, compute_truth=False,
            )
        )
        stats[name] = {e: scenario_means(res, e)["geq"] for e in ("m1", "m2", "m3", "tr")}
    dml_res = run_scenario(
        ScenarioSpec(
            dgp=dgp, n=2000, reps=200, estimators=("dml",), strata=("10",),
            contrast="geq", seed=7, compute_truth=False,
        )
    )
    dml_mean, _dml_se = scenario_means(dml_res, "dml")["geq"]

    tr_bias = {name: stats[name]["tr"][0] - truth for name in scenarios}
    ok_tr = all(abs(b) <= 0.01 for b in tr_bias.values())
    ok_dml = abs(dml_mean - truth) <= 0.01
    broken_z = {}
    for name, plugins in needed.items():
        zs = []
        for p in plugins:
            mean, se = stats[name][p]
            zs.append(abs(mean - truth) / se)
        broken_z[name] = max(zs)
    ok_plugins = all(z > 3.0 for z in broken_z.values())
    ok = ok_tr and ok_dml and ok_plugins
    worst_tr = max(abs(b) for b in tr_bias.values())
    criterion(
        "c04",
        ok,
        f"tr worst |bias| {worst_tr:.4f}, dml bias {dml_mean - truth:+.4f}, "
        f"broken-model z " + ", ".join(f"{k} {v:.0f}" for k, v in broken_z.items()),
    )
    assert ok, (tr_bias, dml_mean - truth, broken_z)


def test_c05_misspecification_grid_ordinal(criterion, truth_cache):
    dgp = DgpSpec(kind="ordinal")
    truth = cached_truth(truth_cache, dgp, StratumId.S10, WIN_PAIR)
    scenarios = {
        "all": (True, True, True),
        "tp": (False, True, True),
        "ps": (True, False, True),
        "oc": (True, True, False),
    }
    worst = 0.0
    ok = True
    for name, (tp, ps, oc) in scenarios.items():
        res = run_scenario(
            ScenarioSpec(
                dgp=dgp, tp=tp, ps=ps, oc=oc, n=2000, reps=100,
                estimators=("tr",), strata=("10",), contrast="winpair",
                seed=13, compute_truth=False,
            )
        )
        means = scenario_means(res, "tr")
        for ci, comp in enumerate(("win", "loss")):
            bias = abs(means[comp][0] - float(truth.value[ci]))
            worst = max(worst, bias)
            ok = ok and bias <= 0.015
    criterion("c05", ok, f"worst |bias| {worst:.4f}")
    assert ok


def test_c06_uptake_share_double_robustness(criterion):
    dgp = DgpSpec(kind="gaussian")
    data, _ = gen_dgp_gaussian(5000, 3)
    targets = {z: oracle_marginal_pz(dgp, z, draws=1_000_000) for z in (0, 1)}
    worst = 0.0
    ok = True
    for tp, ps in ((False, True), (True, False)):
        nspec = misspecified_nuisance(tp, ps, True)
        bundle = fit_nuisance_bundle(
            data, nspec, DIFFERENCE, strata=(StratumId.S10,), rng_seed=0
        )
        for z in (0, 1):
            err = abs(estimate_pz_dr(data, bundle.subset, z) - targets[z])
            worst = max(worst, err)
            ok = ok and err < 0.01
    criterion("c06", ok, f"worst |err| {worst:.4f}")
    assert ok


def test_c07_kernel_average_matches_numerator_truth(criterion, truth_cache):
    dgp = DgpSpec(kind="gaussian")
    reps, n = 30, 4000
    details = []
    ok = True
    for h in (DIFFERENCE, GEQ_INDICATOR):
        truth = cached_truth(truth_cache, dgp, StratumId.S10, h)
        share = truth.n_stratum / truth.draws
        se_share = math.sqrt(share * (1 - share) / truth.draws)
        value = float(truth.value[0])
        tau_n = value * share**2
        se_tau = math.sqrt(
            (share**2 * float(truth.se[0])) ** 2 + (value * 2 * share * se_share) ** 2
        )
        bundle = oracle_nuisance_bundle(dgp, h)
        nums = []
        for r in range(reps):
            data, _ = gen_dgp_gaussian(n, 300 + r)
            ctx = make_kernel_context(data, bundle, StratumId.S10, h)
            nums.append(float(tr_estimate(data, ctx).numerator[0]))
        arr = np.array(nums)
        se_mean = arr.std(ddof=1) / math.sqrt(reps)
        gap = abs(arr.mean() - tau_n)
        tol = 2 * math.sqrt(se_mean**2 + se_tau**2)
        ok = ok and gap <= tol
        details.append(f"{h.name} gap/tol {gap / tol:.2f}")
    criterion("c07", ok, ", ".join(details))
    assert ok


def test_c08_small_sample_reference_equality(criterion):
    grid = [("10", "geq"), ("00", "difference"), ("11", "winpair")]
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = 4 + seed % 5
        kind = "ordinal" if seed % 4 == 3 else "gaussian"
        stratum_name, contrast_name = grid[seed % 3]
        data = cases.draw_dataset(rng, n, kind=kind)
        bundle, nu, h = cases.fixed_nuisance_pair(contrast_name, kind=kind)
        stratum = StratumId(stratum_name)
        ctx = make_kernel_context(data, bundle, stratum, h)
        x, z, d, y = data.x, np.asarray(data.z), np.asarray(data.d), data.y
        for mode in ("pi_p", "pi_mu", "p_mu"):
            ref = oracles.plugin_reference(x, z, d, y, nu, h, stratum_name, mode)
            rep = plugin_estimate(data, ctx, mode)
            worst = max(worst, float(np.max(np.abs(rep.point - ref[0]))))
        ref = oracles.tr_reference(x, z, d, y, nu, h, stratum_name)
        rep = tr_estimate(data, ctx)
        worst = max(worst, float(np.max(np.abs(rep.point - ref[0]))))
    ok = worst < 1e-10
    criterion("c08", ok, f"max |diff| {worst:.2e} over 50 datasets")
    assert ok


def test_c09_zero_violation_reduction(criterion):
    data, _ = gen_dgp_gaussian(800, 2)
    nspec = NuisanceSpec()
    bundle = fit_nuisance_bundle(
        data, nspec, DIFFERENCE, strata=MONOTONE_STRATA, rng_seed=3
    )
    reports = sensitivity_estimate(
        data, DIFFERENCE, SensitivityFunction("constant", 0.0), "tr",
        bundle=bundle, nuisance=nspec,
    )
    worst = 0.0
    for st in MONOTONE_STRATA:
        ctx = make_kernel_context(data, bundle, st, DIFFERENCE)
        mono = tr_estimate(data, ctx)
        worst = max(worst, float(np.max(np.abs(reports[st].point - mono.point))))
    scores = eta_principal_scores(0.8, 0.2, 0.25)
    boundary = np.allclose(scores, (0.8, 0.2, 0.0, 0.0), atol=1e-12)
    ok = worst <= 1e-12 and boundary
    criterion("c09", ok, f"max |diff| {worst:.1e}, boundary scores {scores}")
    assert ok


def test_c10_bootstrap_coverage(criterion, truth_cache):
    dgp = DgpSpec(kind="gaussian")
    truth = float(cached_truth(truth_cache, dgp, StratumId.S10, DIFFERENCE).value[0])
    datasets, b, n = 200, 200, 1000
    fn = estimator_closure("tr", EstimandSpec(StratumId.S10, DIFFERENCE))
    hits = 0
    for i in range(datasets):
        data, _ = gen_dgp_gaussian(n, 5000 + i)
        boot = bootstrap_ci(data, fn, b=b, level=0.95, rng_seed=int(
            np.random.SeedSequence(17, spawn_key=(i,)).generate_state(1)[0]
        ))
        lo, hi = boot.ci[0]
        hits += int(lo <= truth <= hi)
    coverage = hits / datasets
    ok = 0.90 <= coverage <= 0.98
    criterion("c10", ok, f"coverage {coverage:.3f} over {datasets} datasets")
    assert ok


def test_c11_display_format(criterion):
    shown = _display(0.5391, (0.4802, 0.5976))
    ok = shown == "0.539 (0.480, 0.598)" and _display(1.0, None) == "1.000"
    criterion("c11", ok, shown)
    assert ok


def test_c12_pair_pass_speed_and_thread_identity(criterion):
    data, _ = gen_dgp_gaussian(2000, 0)

    def full_estimate(threads):
        bundle = fit_nuisance_bundle(
            data, NuisanceSpec(), GEQ_INDICATOR, strata=(StratumId.S10,), rng_seed=0
        )
        ctx = make_kernel_context(data, bundle, StratumId.S10, GEQ_INDICATOR)
        return tr_estimate(data, ctx, "tiled", threads)

    t_single = math.inf
    for _ in range(2):
        t0 = time.perf_counter()
        one = full_estimate(1)
        t_single = min(t_single, time.perf_counter() - t0)
    t0 = time.perf_counter()
    four = full_estimate(4)
    t_four = time.perf_counter() - t0
    identical = (
        np.array_equal(one.point, four.point)
        and np.array_equal(one.numerator, four.numerator)
        and one.denominator == four.denominator
    )
    ok = t_single < 5.0 and identical
    detail = f"single {t_single:.2f}s, 4 threads {t_four:.2f}s, bit-identical {identical}"
    cores = os.cpu_count() or 1
    if cores >= 4:
        ok = ok and t_four < t_single / 2
    elif cores > 1:
        ok = ok and t_four < t_single
    criterion("c12", ok, detail)
    assert ok
