"""Plug-in, triply robust, and cross-fitted estimators against literal
reference implementations and worked examples."""

import numpy as np
import pytest

import cases
import oracles
from principalpairs import (
    DIFFERENCE,
    GEQ_INDICATOR,
    PLUGIN_MODES,
    WIN_PAIR,
    ContrastFunction,
    Dataset,
    EstimandSpec,
    IntermediateModel,
    NuisanceBundle,
    NuisanceSpec,
    NuisanceSubset,
    Observation,
    OutcomeKind,
    PairwiseMeanModel,
    PropensityModel,
    StratumId,
    dml_estimate,
    estimate_pz_dr,
    kernel_g,
    make_kernel_context,
    partition_pairs,
    plugin_estimate,
    psi_dz,
    psi_dz_values,
    tr_estimate,
)
from principalpairs.errors import (
    BadK,
    DenominatorNearZero,
    StratumNotAllowed,
    UndefinedOutcome,
)


def const_subset(pi, p1, p0):
    return NuisanceSubset(
        propensity=PropensityModel.from_function(lambda x: np.full(x.shape[0], pi), eps=0.0),
        intermediate=IntermediateModel.from_functions(
            lambda x: np.full(x.shape[0], p1), lambda x: np.full(x.shape[0], p0), eps=0.0
        ),
    )


class TestPsi:
    def test_on_arm_with_uptake(self):
        sub = const_subset(0.5, 0.5, 0.5)
        o = Observation((0.0,), 1, 1, 1.0)
        assert psi_dz(o, sub, 1) == pytest.approx(1.5)

    def test_off_arm_returns_model_value(self):
        sub = const_subset(0.5, 0.7, 0.2)
        o = Observation((0.0,), 0, 0, None)
        assert psi_dz(o, sub, 1) == pytest.approx(0.7)

    def test_degenerate_model_value_one(self):
        sub = const_subset(0.5, 1.0, 0.2)
        o = Observation((0.0,), 1, 1, 1.0)
        assert psi_dz(o, sub, 1) == pytest.approx(1.0)

    def test_vectorized_matches_scalar(self):
        bundle, _, _ = cases.fixed_nuisance_pair("geq")
        data = cases.draw_dataset(np.random.default_rng(0), 12)
        sub = bundle.subset
        for z in (0, 1):
            vec = psi_dz_values(data, sub, z)
            for i in range(data.n):
                assert vec[i] == pytest.approx(psi_dz(data.observation(i), sub, z), abs=1e-12)


class TestPzDr:
    def test_worked_example(self):
        data = Dataset(
            x=np.zeros((4, 1)),
            z=np.array([1, 1, 0, 0]),
            d=np.array([1, 0, 1, 0]),
            y=np.ones(4),
        )
        sub = const_subset(0.5, 0.0, 0.0)
        assert estimate_pz_dr(data, sub, 1) == pytest.approx(0.5)

    def test_no_unit_on_arm_returns_model_constant(self):
        data = Dataset(
            x=np.zeros((3, 1)), z=np.zeros(3), d=np.array([1, 0, 1]), y=np.ones(3)
        )
        sub = const_subset(0.5, 0.37, 0.2)
        assert estimate_pz_dr(data, sub, 1) == pytest.approx(0.37)

    def test_matches_reference_on_random_data(self):
        bundle, nu, _ = cases.fixed_nuisance_pair("geq")
        data = cases.draw_dataset(np.random.default_rng(1), 25)
        for z in (0, 1):
            ref = oracles.pz_dr_reference(data.x, data.z, data.d, nu, z)
            assert estimate_pz_dr(data, bundle.subset, z) == pytest.approx(ref, abs=1e-12)


def toy_dataset():
    return Dataset(
        x=np.zeros((2, 1)),
        z=np.array([1, 0]),
        d=np.array([1, 0]),
        y=np.array([2.0, 1.0]),
    )


def toy_bundle():
    """Constant nuisances pi=0.5, p1=0.8, p0=0.2 and a flat outcome model, so
    every pairwise exceedance mean is exactly one half."""
    zero = lambda x: np.zeros(np.atleast_2d(x).shape[0])
    cell_fns = {cell: zero for cell in cases.ALL_CELLS}
    return NuisanceBundle(
        propensity=PropensityModel.from_function(lambda x: np.full(x.shape[0], 0.5), eps=0.0),
        intermediate=IntermediateModel.from_functions(
            lambda x: np.full(x.shape[0], 0.8), lambda x: np.full(x.shape[0], 0.2), eps=0.0
        ),
        pairwise_mean=PairwiseMeanModel("gaussian", GEQ_INDICATOR, cell_fns, sigma=1.0),
    )


class TestTwoUnitToy:
    def setup_method(self):
        self.data = toy_dataset()
        self.ctx = make_kernel_context(self.data, toy_bundle(), StratumId.S10, GEQ_INDICATOR)

    def test_weighting_plugin(self):
        rep = plugin_estimate(self.data, self.ctx, "pi_p")
        assert rep.point[0] == pytest.approx(2.25, abs=1e-12)
        assert rep.numerator[0] == pytest.approx(2.25, abs=1e-12)
        assert rep.denominator == pytest.approx(1.0, abs=1e-12)

    def test_score_plugin_is_zero(self):
        rep = plugin_estimate(self.data, self.ctx, "pi_mu")
        assert rep.point[0] == 0.0

    def test_projection_plugin(self):
        rep = plugin_estimate(self.data, self.ctx, "p_mu")
        assert rep.point[0] == pytest.approx(0.18, abs=1e-12)

    def test_triply_robust(self):
        rep = tr_estimate(self.data, self.ctx)
        assert rep.point[0] == pytest.approx(1.0625, abs=1e-12)
        assert rep.numerator[0] == pytest.approx(1.0625, abs=1e-12)
        assert rep.denominator == pytest.approx(1.0, abs=1e-12)

    def test_kernel_on_the_pair(self):
        g = kernel_g(self.data.observation(0), self.data.observation(1), self.ctx)
        assert g[0] == pytest.approx(1.0625, abs=1e-12)

    def test_kernel_symmetry(self):
        g_fwd = kernel_g(self.data.observation(0), self.data.observation(1), self.ctx)
        g_bwd = kernel_g(self.data.observation(1), self.data.observation(0), self.ctx)
        np.testing.assert_array_equal(g_fwd, g_bwd)

    def test_kernel_both_treated(self):
        o = Observation((0.0,), 1, 1, 2.0)
        g = kernel_g(o, o, self.ctx)
        assert g[0] == pytest.approx(0.5, abs=1e-12)


CASE_GRID = [
    (seed, stratum, contrast, kind)
    for seed in (0, 1, 2)
    for stratum, contrast in (("10", "geq"), ("00", "difference"), ("11", "winpair"))
    for kind in ("gaussian", "ordinal")
]


class TestReferenceEquivalence:
    """Production estimates equal scalar-by-scalar double-loop transcriptions."""

    @pytest.mark.parametrize("seed,stratum,contrast,kind", CASE_GRID)
    def test_plugins_and_tr(self, seed, stratum, contrast, kind):
        rng = np.random.default_rng(100 + seed)
        data = cases.draw_dataset(rng, int(rng.integers(5, 9)), kind=kind)
        bundle, nu, h = cases.fixed_nuisance_pair(contrast, kind=kind)
        sid = StratumId(stratum)
        ctx = make_kernel_context(data, bundle, sid, h)
        hfun = lambda a, b: np.asarray(h(a, b), dtype=float)
        for mode in PLUGIN_MODES:
            rep = plugin_estimate(data, ctx, mode)
            ref_point, ref_num, ref_den = oracles.plugin_reference(
                data.x, data.z, data.d, data.y, nu, hfun, stratum, mode
            )
            np.testing.assert_allclose(rep.point, ref_point, rtol=1e-10, atol=1e-10)
            np.testing.assert_allclose(rep.numerator, ref_num, rtol=1e-10, atol=1e-10)
            assert rep.denominator == pytest.approx(ref_den, rel=1e-10)
        rep = tr_estimate(data, ctx)
        ref_point, ref_num, ref_den = oracles.tr_reference(
            data.x, data.z, data.d, data.y, nu, hfun, stratum
        )
        np.testing.assert_allclose(rep.point, ref_point, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(rep.numerator, ref_num, rtol=1e-10, atol=1e-10)

    def test_floored_scores_flow_through(self):
        # force crossings so the delta floor participates in the comparison
        rng = np.random.default_rng(77)
        data = cases.draw_dataset(rng, 7)
        bundle, nu, h = cases.fixed_nuisance_pair("difference", delta=0.3)
        ctx = make_kernel_context(data, bundle, StratumId.S10, h, delta=0.3)
        hfun = lambda a, b: np.asarray(h(a, b), dtype=float)
        rep = tr_estimate(data, ctx)
        ref_point, _, _ = oracles.tr_reference(data.x, data.z, data.d, data.y, nu, hfun, "10")
        np.testing.assert_allclose(rep.point, ref_point, rtol=1e-10, atol=1e-10)


class TestInvariances:
    def test_tr_is_invariant_to_row_order(self):
        rng = np.random.default_rng(8)
        data = cases.draw_dataset(rng, 120)
        bundle, _, h = cases.fixed_nuisance_pair("geq")
        perm = rng.permutation(data.n)
        shuffled = data.subset(perm)
        rep_a = tr_estimate(data, make_kernel_context(data, bundle, StratumId.S10, h))
        rep_b = tr_estimate(shuffled, make_kernel_context(shuffled, bundle, StratumId.S10, h))
        np.testing.assert_allclose(rep_a.point, rep_b.point, rtol=1e-12)
        np.testing.assert_allclose(rep_a.numerator, rep_b.numerator, rtol=1e-12)

    def test_tr_is_linear_in_the_contrast(self):
        rng = np.random.default_rng(9)
        data = cases.draw_dataset(rng, 40, kind="ordinal")
        cat = np.arange(1.0, 4.0)
        mat_u = np.broadcast_to(cat[:, None], (3, 3))
        mat_v = np.broadcast_to(cat[None, :], (3, 3))
        parts = {}
        for name, mat in (("u", mat_u), ("v", mat_v), ("uv", mat_u - mat_v)):
            h = ContrastFunction.from_category_matrix(name, mat)
            bundle, _, _ = cases.fixed_nuisance_pair(h, kind="ordinal")
            ctx = make_kernel_context(data, bundle, StratumId.S10, h)
            parts[name] = tr_estimate(data, ctx)
        np.testing.assert_allclose(
            parts["uv"].numerator, parts["u"].numerator - parts["v"].numerator, atol=1e-12
        )
        # the tabulated row-minus-column contrast is the difference contrast
        bundle, _, _ = cases.fixed_nuisance_pair("difference", kind="ordinal")
        ctx = make_kernel_context(data, bundle, StratumId.S10, DIFFERENCE)
        np.testing.assert_allclose(
            tr_estimate(data, ctx).numerator, parts["uv"].numerator, atol=1e-12
        )

    def test_vector_contrast_components_split(self):
        rng = np.random.default_rng(10)
        data = cases.draw_dataset(rng, 35, kind="ordinal")
        table = WIN_PAIR.category_matrix(3)
        bundle, _, _ = cases.fixed_nuisance_pair("winpair", kind="ordinal")
        both = tr_estimate(data, make_kernel_context(data, bundle, StratumId.S11, WIN_PAIR))
        for comp in range(2):
            h = ContrastFunction.from_category_matrix(f"c{comp}", table[comp])
            b1, _, _ = cases.fixed_nuisance_pair(h, kind="ordinal")
            one = tr_estimate(data, make_kernel_context(data, b1, StratumId.S11, h))
            assert one.point[0] == pytest.approx(both.point[comp], abs=1e-12)


class TestStrategies:
    def test_tiled_factored_auto_agree(self):
        rng = np.random.default_rng(12)
        data = cases.draw_dataset(rng, 150)
        bundle, _, h = cases.fixed_nuisance_pair("difference")
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        reports = {
            s: tr_estimate(data, ctx, strategy=s).point for s in ("tiled", "factored", "auto")
        }
        np.testing.assert_allclose(reports["tiled"], reports["factored"], rtol=1e-10)
        np.testing.assert_array_equal(reports["auto"], reports["factored"])

    def test_plugin_strategies_agree(self):
        rng = np.random.default_rng(13)
        data = cases.draw_dataset(rng, 90, kind="ordinal")
        bundle, _, h = cases.fixed_nuisance_pair("winpair", kind="ordinal")
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        for mode in PLUGIN_MODES:
            a = plugin_estimate(data, ctx, mode, strategy="tiled").point
            b = plugin_estimate(data, ctx, mode, strategy="factored").point
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_factored_unavailable_for_gaussian_exceedance(self):
        rng = np.random.default_rng(14)
        data = cases.draw_dataset(rng, 30)
        bundle, _, h = cases.fixed_nuisance_pair("geq")
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        with pytest.raises(ValueError):
            tr_estimate(data, ctx, strategy="factored")

    def test_unknown_strategy(self):
        data = toy_dataset()
        ctx = make_kernel_context(data, toy_bundle(), StratumId.S10, GEQ_INDICATOR)
        with pytest.raises(ValueError):
            tr_estimate(data, ctx, strategy="telepathy")

    def test_thread_count_does_not_change_bits(self):
        rng = np.random.default_rng(15)
        data = cases.draw_dataset(rng, 300)
        bundle, _, h = cases.fixed_nuisance_pair("geq")
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        one = tr_estimate(data, ctx, strategy="tiled", threads=1)
        four = tr_estimate(data, ctx, strategy="tiled", threads=4)
        np.testing.assert_array_equal(one.point, four.point)
        np.testing.assert_array_equal(one.numerator, four.numerator)


class TestPartition:
    def test_layout_n10_k3(self):
        part = partition_pairs(10, 3)
        assert [len(f) for f in part.folds] == [3, 4, 3]
        np.testing.assert_array_equal(np.concatenate(part.folds), np.arange(10))
        assert part.n_blocks == 6
        sizes = {}
        seen = set()
        for l, block in enumerate(part.block_folds):
            pairs = part.block_pairs(l)
            assert not (set(map(tuple, pairs)) & seen)
            seen |= set(map(tuple, pairs))
            sizes[block] = len(pairs)
        assert len(seen) == 45
        assert sizes[(0, 0)] == 3 and sizes[(0, 1)] == 12
        diag = part.block_folds.index((0, 0))
        assert set(map(tuple, part.block_pairs(diag))) == {(0, 1), (0, 2), (1, 2)}

    def test_unseeded_is_identity_order(self):
        part = partition_pairs(12, 4)
        np.testing.assert_array_equal(np.concatenate(part.folds), np.arange(12))

    def test_seeded_shuffle_covers_everything(self):
        part = partition_pairs(11, 3, rng_seed=5)
        all_units = np.sort(np.concatenate(part.folds))
        np.testing.assert_array_equal(all_units, np.arange(11))
        again = partition_pairs(11, 3, rng_seed=5)
        for f1, f2 in zip(part.folds, again.folds):
            np.testing.assert_array_equal(f1, f2)
        assert any(
            not np.array_equal(f1, f2)
            for f1, f2 in zip(part.folds, partition_pairs(11, 3, rng_seed=6).folds)
        )

    @pytest.mark.parametrize("n,k", [(4, 2), (9, 2), (20, 5), (47, 6), (60, 30)])
    def test_blocks_partition_all_pairs(self, n, k):
        part = partition_pairs(n, k, rng_seed=1)
        seen = set()
        for l in range(part.n_blocks):
            for i, j in part.block_pairs(l):
                assert i < j
                assert (i, j) not in seen
                seen.add((i, j))
        assert len(seen) == n * (n - 1) // 2

    def test_block_training_excludes_both_folds(self):
        part = partition_pairs(30, 3, rng_seed=2)
        for l, block in enumerate(part.block_folds):
            train = set(part.block_train(l))
            for fold_id in set(block):
                assert not (train & set(part.folds[fold_id]))

    @pytest.mark.parametrize("n,k", [(10, 1), (10, 6), (3, 2)])
    def test_bad_k(self, n, k):
        with pytest.raises(BadK):
            partition_pairs(n, k)


class TestDml:
    def test_equals_tr_when_nuisances_are_injected(self):
        rng = np.random.default_rng(16)
        data = cases.draw_dataset(rng, 80)
        bundle, _, h = cases.fixed_nuisance_pair("geq")
        spec = EstimandSpec(StratumId.S10, h)
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        tr = tr_estimate(data, ctx, strategy="tiled")
        dml = dml_estimate(data, spec, k=4, oracle_bundle=bundle, strategy="tiled")
        np.testing.assert_array_equal(dml.point, tr.point)
        np.testing.assert_array_equal(dml.numerator, tr.numerator)
        assert dml.denominator == tr.denominator

    def test_seed_determinism(self):
        rng = np.random.default_rng(17)
        data = cases.draw_dataset(rng, 150)
        spec = EstimandSpec(StratumId.S10, DIFFERENCE)
        a = dml_estimate(data, spec, k=3, rng_seed=4)
        b = dml_estimate(data, spec, k=3, rng_seed=4)
        np.testing.assert_array_equal(a.point, b.point)
        c = dml_estimate(data, spec, k=3, rng_seed=5)
        assert not np.array_equal(a.point, c.point)

    def test_fitted_run_reports_folds(self):
        rng = np.random.default_rng(18)
        data = cases.draw_dataset(rng, 160)
        spec = EstimandSpec(StratumId.S10, DIFFERENCE)
        rep = dml_estimate(data, spec, k=4, rng_seed=0)
        assert rep.meta["k_folds"] == 4 and rep.meta["n_blocks"] == 10
        assert sum(rep.meta["fold_sizes"]) == 160
        assert np.isfinite(rep.point).all()

    def test_two_folds_need_injected_nuisances(self):
        from principalpairs.errors import ConfigError

        rng = np.random.default_rng(30)
        data = cases.draw_dataset(rng, 60)
        spec = EstimandSpec(StratumId.S10, DIFFERENCE)
        with pytest.raises(ConfigError):
            dml_estimate(data, spec, k=2, rng_seed=0)
        bundle, _, _ = cases.fixed_nuisance_pair("difference")
        rep = dml_estimate(data, spec, k=2, oracle_bundle=bundle)
        assert np.isfinite(rep.point).all()

    def test_nuisance_spec_is_honored(self):
        rng = np.random.default_rng(19)
        data = cases.draw_dataset(rng, 140)
        spec = EstimandSpec(StratumId.S10, DIFFERENCE)
        base = dml_estimate(data, spec, k=3, rng_seed=1)
        squashed = dml_estimate(
            data,
            spec,
            nuisance=NuisanceSpec(propensity_features=lambda x: np.abs(x[:, :1])),
            k=3,
            rng_seed=1,
        )
        assert not np.array_equal(base.point, squashed.point)


class TestGuards:
    def test_denominator_near_zero(self):
        data = Dataset(
            x=np.zeros((4, 1)),
            z=np.array([1, 1, 0, 0]),
            d=np.array([1, 0, 1, 0]),
            y=np.array([1.0, 2.0, 3.0, 4.0]),
        )
        zero = lambda x: np.zeros(np.atleast_2d(x).shape[0])
        bundle = NuisanceBundle(
            propensity=PropensityModel.from_function(lambda x: np.full(x.shape[0], 0.5), eps=0.0),
            intermediate=IntermediateModel.from_functions(
                lambda x: np.full(x.shape[0], 0.5), lambda x: np.full(x.shape[0], 0.5), eps=0.0
            ),
            pairwise_mean=PairwiseMeanModel(
                "gaussian", GEQ_INDICATOR, {c: zero for c in cases.ALL_CELLS}, sigma=1.0
            ),
        )
        ctx = make_kernel_context(data, bundle, StratumId.S10, GEQ_INDICATOR)
        with pytest.raises(DenominatorNearZero) as e:
            tr_estimate(data, ctx)
        assert e.value.stratum == "10"
        with pytest.raises(DenominatorNearZero):
            plugin_estimate(data, ctx, "pi_p")

    def test_defier_stratum_rejected(self):
        data = toy_dataset()
        with pytest.raises(StratumNotAllowed):
            make_kernel_context(data, toy_bundle(), StratumId.S01, GEQ_INDICATOR)

    def test_undefined_outcome_in_a_used_cell(self):
        # stratum 00 compares never-takers: cell (1, 0) rows carry the outcome
        data = Dataset(
            x=np.zeros((4, 1)),
            z=np.array([1, 1, 0, 0]),
            d=np.array([0, 0, 0, 0]),
            y=np.array([np.nan, 1.0, 2.0, 0.5]),
        )
        ctx = make_kernel_context(data, toy_bundle(), StratumId.S00, GEQ_INDICATOR)
        with pytest.raises(UndefinedOutcome):
            tr_estimate(data, ctx)
        with pytest.raises(UndefinedOutcome):
            plugin_estimate(data, ctx, "pi_p")
        rep = plugin_estimate(data, ctx, "p_mu")  # no observed outcomes needed
        assert np.isfinite(rep.point).all()

    def test_mode_and_size_validation(self):
        data = toy_dataset()
        ctx = make_kernel_context(data, toy_bundle(), StratumId.S10, GEQ_INDICATOR)
        with pytest.raises(ValueError):
            plugin_estimate(data, ctx, "pi_pi")
        single = data.subset(np.array([0]))
        with pytest.raises(ValueError):
            sctx = make_kernel_context(single, toy_bundle(), StratumId.S10, GEQ_INDICATOR)
            plugin_estimate(single, sctx, "pi_p")

    def test_plugin_modes_constant(self):
        assert PLUGIN_MODES == ("pi_p", "pi_mu", "p_mu")


class TestKernelAverage:
    def test_kernel_mean_is_the_tr_numerator(self):
        rng = np.random.default_rng(20)
        data = cases.draw_dataset(rng, 9)
        bundle, _, h = cases.fixed_nuisance_pair("winpair")
        ctx = make_kernel_context(data, bundle, StratumId.S10, h)
        total = np.zeros(2)
        for i in range(data.n):
            for j in range(i + 1, data.n):
                total += kernel_g(data.observation(i), data.observation(j), ctx)
        total /= data.n * (data.n - 1) / 2
        rep = tr_estimate(data, ctx)
        np.testing.assert_allclose(total, rep.numerator, atol=1e-12)
