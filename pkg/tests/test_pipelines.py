import numpy as np
import pytest

from hetmm.mm import MmOptions
from hetmm.models import exponential_experiment_model, upsilon
from hetmm.pipelines import (
    WEIGHTING_BISQUARE,
    bisquare_leverage_weights,
    fit_classical,
    fit_estimators,
    fit_method,
    fit_stepwise,
    fit_stepwise_n,
    robust_distance_weights,
)
from hetmm.simulate import GroundTruth, NAMED_SCHEMES, apply_contamination, generate_sample


@pytest.fixture(scope="module")
def model():
    return exponential_experiment_model()


@pytest.fixture(scope="module")
def het_sample(model):
    return generate_sample(100, GroundTruth(), seed=2201, model=model)


class TestLeverageWeights:
    def test_clean_uniform_sample_keeps_high_weight(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, 500)
        w = bisquare_leverage_weights(x)
        assert np.all(w > 0.5)
        assert np.all(w <= 1.0)

    def test_gross_leverage_point_zeroed(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.uniform(0, 1, 95), np.full(5, 3.5)])
        w = bisquare_leverage_weights(x)
        assert np.all(w[-5:] == 0.0)
        assert np.all(w[:95] > 0.0)

    def test_symmetric_in_distance(self):
        x = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
        w = bisquare_leverage_weights(x)
        assert w[0] == pytest.approx(w[4], rel=1e-12)
        assert w[1] == pytest.approx(w[3], rel=1e-12)

    def test_degenerate_spread_rejected(self):
        with pytest.raises(ValueError):
            bisquare_leverage_weights(np.ones(10))

    def test_multivariate_analogue_smoke(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, (50, 2))
        X[-2:] = 10.0
        w = robust_distance_weights(X)
        assert w.shape == (50,)
        assert np.all(w[-2:] == 0.0)
        assert np.all(w[:-2] > 0.0)


class TestStepwise:
    def test_tags_follow_weighting(self, model, het_sample):
        x, y = het_sample
        opts = MmOptions(seed=7)
        assert fit_stepwise(x, y, model, opts).method == "HMM"
        assert fit_stepwise(x, y, model, opts, WEIGHTING_BISQUARE).method == "HWMM"
        assert fit_stepwise_n(x, y, model, opts).method == "HMM_N"
        assert fit_stepwise_n(x, y, model, opts, WEIGHTING_BISQUARE).method == "HWMM_N"

    def test_unknown_weighting_rejected(self, model, het_sample):
        x, y = het_sample
        with pytest.raises(ValueError):
            fit_stepwise(x, y, model, MmOptions(seed=7), weighting="nope")

    def test_full_result_fields(self, model, het_sample):
        x, y = het_sample
        fit = fit_stepwise(x, y, model, MmOptions(seed=7))
        assert fit.complete and fit.converged
        assert fit.sigma > 0
        assert fit.lam.shape == (1,)
        assert fit.lambda_refined.shape == (1,)
        assert fit.sigma_refined is None  # joint-system route never re-solves sigma
        fit_n = fit_stepwise_n(x, y, model, MmOptions(seed=7))
        assert fit_n.sigma_refined is not None and fit_n.sigma_refined > 0

    def test_pseudo_variable_identity(self, model, het_sample):
        # the variance-stabilized objective equals the homoscedastic objective
        # on the transformed observations, at any candidate parameter
        x, y = het_sample
        opts = MmOptions(seed=7)
        fit = fit_stepwise(x, y, model, opts)
        sigma, lam, beta_ini = fit.sigma, fit.lam, fit.beta_ini
        div = upsilon(model, x, lam, beta_ini)
        y_star = y / div
        rho1 = opts.rho1
        rng = np.random.default_rng(123)
        for _ in range(10):
            beta = rng.uniform(0.5, 8.0, 2)
            direct = np.mean(rho1.rho((y - model.g(x, beta)) / (sigma * div)))
            transformed = np.mean(
                rho1.rho((y_star - model.g(x, beta) / div) / sigma)
            )
            assert direct == pytest.approx(transformed, rel=1e-12)

    def test_lambda_provenance_differs_between_routes(self, model):
        # a skewed-error sample separates the joint-system and log-residual
        # estimates of the variance parameters
        rng = np.random.default_rng(77)
        x = rng.uniform(0, 1, 120)
        eps = rng.standard_normal(120) ** 3  # heavy, asymmetric-ish
        y = model.g(x, np.array([5.0, 2.0])) + np.exp((x + 1.0) ** 2) * eps
        opts = MmOptions(seed=5)
        f_joint = fit_stepwise(x, y, model, opts)
        f_log = fit_stepwise_n(x, y, model, opts)
        assert f_joint.lam[0] != f_log.lam[0]

    def test_deterministic_under_fixed_seed(self, model, het_sample):
        x, y = het_sample
        a = fit_stepwise(x, y, model, MmOptions(seed=19))
        b = fit_stepwise(x, y, model, MmOptions(seed=19))
        assert np.array_equal(a.beta, b.beta)
        assert a.sigma == b.sigma
        an = fit_stepwise_n(x, y, model, MmOptions(seed=19))
        bn = fit_stepwise_n(x, y, model, MmOptions(seed=19))
        assert np.array_equal(an.beta, bn.beta)
        assert an.sigma_refined == bn.sigma_refined

    def test_zero_noise_short_circuit(self, model):
        rng = np.random.default_rng(31)
        x = rng.uniform(0, 1, 50)
        y = model.g(x, np.array([5.0, 2.0]))
        fit = fit_stepwise(x, y, model, MmOptions(seed=3))
        assert fit.beta == pytest.approx([5.0, 2.0], abs=1e-6)
        assert np.array_equal(fit.beta, fit.beta_ini)
        assert fit.sigma == 0.0
        assert fit.diagnostics.get("exact_fit")
        fit_n = fit_stepwise_n(x, y, model, MmOptions(seed=3))
        assert fit_n.beta == pytest.approx([5.0, 2.0], abs=1e-6)
        assert fit_n.sigma_refined == 0.0

    def test_homoscedastic_truth_refined_lambda_near_zero(self, model):
        from hetmm.scales import m_scale

        truth = GroundTruth(beta=(5.0, 2.0), lam=(0.0,), sigma=1.0)
        lam_ref, sig_ratio = [], []
        for rep in range(30):
            x, y = generate_sample(100, truth, seed=[404, rep], model=model)
            fit = fit_stepwise_n(x, y, model, MmOptions(seed=rep))
            lam_ref.append(fit.lambda_refined[0])
            # against the homoscedastic M-scale of the same fit's residuals
            sig_ratio.append(fit.sigma_refined / m_scale(y - model.g(x, fit.beta)))
        assert abs(np.median(lam_ref)) <= 0.1
        assert np.median(sig_ratio) == pytest.approx(1.0, abs=0.05)

    def test_minimum_sample_size(self, model):
        x, y = generate_sample(4, GroundTruth(), seed=1, model=model)
        with pytest.raises(ValueError):
            fit_stepwise(x, y, model, MmOptions(seed=1))


class TestClassical:
    def test_ls_perfect_data(self, model):
        rng = np.random.default_rng(51)
        x = rng.uniform(0, 1, 30)
        y = model.g(x, np.array([5.0, 2.0]))
        fit = fit_classical(x, y, model, "LS")
        assert fit.method == "LS"
        assert fit.beta == pytest.approx([5.0, 2.0], abs=1e-6)
        assert fit.lam is None

    def test_unknown_variant(self, model, het_sample):
        x, y = het_sample
        with pytest.raises(ValueError):
            fit_classical(x, y, model, "GLS")


class TestFitEstimators:
    def test_grouped_results_match_single_fits(self, model, het_sample):
        x, y = het_sample
        opts = MmOptions(seed=23)
        grouped = fit_estimators(x, y, model, ["MM", "HMM", "HMM_N"], opts)
        solo = fit_stepwise(x, y, model, opts)
        solo_n = fit_stepwise_n(x, y, model, opts)
        assert np.array_equal(grouped["HMM"].beta, solo.beta)
        assert np.array_equal(grouped["HMM_N"].beta, solo_n.beta)
        assert np.array_equal(grouped["MM"].beta, solo.beta_ini)
        # the initial-fit view carries the joint-system sigma/lambda
        assert grouped["MM"].sigma == solo.sigma
        assert grouped["MM"].lam[0] == solo.lam[0]
        assert grouped["MM"].lambda_refined is None

    def test_unknown_tag_rejected(self, model, het_sample):
        x, y = het_sample
        with pytest.raises(ValueError, match="XTAG"):
            fit_estimators(x, y, model, ["XTAG"])

    def test_fit_method_dispatch(self, model, het_sample):
        x, y = het_sample
        for tag in ["LS", "HLS", "WMM", "HWMM_N"]:
            fit = fit_method(x, y, model, tag, MmOptions(seed=29))
            assert fit.method == tag
            assert fit.complete

    def test_leverage_contamination_stability(self, model):
        # gross leverage points: the weighted refit must stay near truth
        x, y = generate_sample(100, GroundTruth(), seed=606, model=model)
        x, y = apply_contamination(x, y, NAMED_SCHEMES["D1"], seed=607)
        res = fit_estimators(x, y, model, ["HWMM_N", "LS"], MmOptions(seed=71))
        assert abs(res["HWMM_N"].beta[0] - 5.0) < 2.0
        assert res["LS"].beta[0] - 5.0 > 2.0  # LS is dragged up by design
