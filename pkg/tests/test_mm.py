import numpy as np
import pytest

from hetmm.kernels import BisquareRho
from hetmm.mm import MmOptions, SubsetFailureError, linear_mm, nonlinear_mm
from hetmm.models import exponential_experiment_model, linear_model
from hetmm.simulate import GroundTruth, generate_sample


@pytest.fixture(scope="module")
def model():
    return exponential_experiment_model()


class TestLinearMm:
    def test_exact_fit_short_circuit(self):
        v = np.linspace(0, 1, 50)
        z = 2.0 + 3.0 * v
        fit = linear_mm(z, v, MmOptions(seed=1))
        assert fit.exact_fit
        assert fit.alpha == pytest.approx(2.0, abs=1e-10)
        assert fit.lam[0] == pytest.approx(3.0, abs=1e-10)
        assert fit.scale <= 1e-10

    def test_slope_consistent_under_asymmetric_errors(self):
        # log|N(0,1)| noise is skewed; the slope must still center on truth
        slopes = []
        for rep in range(100):
            rng = np.random.default_rng([41, rep])
            v = rng.uniform(0, 4, 1000)
            z = 1.0 + v + np.log(np.abs(rng.standard_normal(1000)))
            fit = linear_mm(z, v, MmOptions(seed=rep))
            slopes.append(fit.lam[0])
        assert np.median(slopes) == pytest.approx(1.0, abs=0.05)

    def test_slope_robust_to_gross_outliers(self):
        slopes = []
        for rep in range(100):
            rng = np.random.default_rng([43, rep])
            v = rng.uniform(0, 4, 200)
            z = 1.0 + v + np.log(np.abs(rng.standard_normal(200)))
            z[:40] = 50.0  # 20% of responses replaced
            fit = linear_mm(z, v, MmOptions(seed=rep))
            slopes.append(fit.lam[0])
        assert abs(np.median(slopes) - 1.0) < 0.1

    def test_seeded_determinism(self):
        rng = np.random.default_rng(5)
        v = rng.uniform(0, 1, 80)
        z = 0.5 - 2.0 * v + rng.standard_normal(80)
        f1 = linear_mm(z, v, MmOptions(seed=9))
        f2 = linear_mm(z, v, MmOptions(seed=9))
        assert f1.alpha == f2.alpha
        assert np.array_equal(f1.lam, f2.lam)
        assert f1.scale == f2.scale

    def test_collinear_design_rejected(self):
        z = np.arange(10.0)
        V = np.ones((10, 1))  # no spread: every subset is singular
        with pytest.raises(SubsetFailureError):
            linear_mm(z, V, MmOptions(seed=2, n_subsets=50))

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(6)
        v = rng.uniform(0, 1, 120)
        z = 1.0 + 2.0 * v + rng.standard_normal(120) * 0.3
        z[::7] += 25.0
        fit = linear_mm(z, v, MmOptions(seed=3))
        assert fit.objective_trace is not None
        assert np.all(np.diff(fit.objective_trace) <= 1e-15)

    def test_too_few_observations(self):
        with pytest.raises(ValueError):
            linear_mm(np.array([1.0, 2.0]), np.array([0.0, 1.0]), MmOptions())


class TestNonlinearMm:
    def test_zero_noise_exact_recovery(self, model):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, 60)
        y = model.g(x, np.array([5.0, 2.0]))
        fit = nonlinear_mm(x, y, model, MmOptions(seed=11))
        assert fit.exact_fit
        assert fit.beta == pytest.approx([5.0, 2.0], abs=1e-6)

    def test_response_scale_equivariance_linear_model(self):
        lin = linear_model()
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, 90)
        y = 1.0 + 2.0 * x + rng.standard_normal(90)
        a = 2.0  # power of two keeps the subset fits numerically aligned
        f1 = nonlinear_mm(x, y, lin, MmOptions(seed=13))
        f2 = nonlinear_mm(x, a * y, lin, MmOptions(seed=13))
        assert f2.beta == pytest.approx(a * f1.beta, rel=1e-8)
        assert f2.s_scale == pytest.approx(a * f1.s_scale, rel=1e-8)

    def test_unit_leverage_weights_bit_identical(self, model):
        x, y = generate_sample(80, GroundTruth(), seed=101, model=model)
        f1 = nonlinear_mm(x, y, model, MmOptions(seed=21))
        f2 = nonlinear_mm(x, y, model, MmOptions(seed=21), leverage_weights=np.ones(80))
        assert np.array_equal(f1.beta, f2.beta)
        assert f1.s_scale == f2.s_scale
        assert f1.objective == f2.objective

    def test_rho1_below_rho0_on_grid(self):
        opts = MmOptions()
        t = np.linspace(0.0, opts.rho1.c, 10_000)
        assert np.all(opts.rho1.rho(t) <= np.asarray(opts.rho0.rho(t)) + 1e-15)

    def test_seeded_determinism(self, model):
        x, y = generate_sample(70, GroundTruth(), seed=103, model=model)
        f1 = nonlinear_mm(x, y, model, MmOptions(seed=31))
        f2 = nonlinear_mm(x, y, model, MmOptions(seed=31))
        assert np.array_equal(f1.beta, f2.beta)
        assert f1.s_scale == f2.s_scale

    def test_objective_never_exceeds_start(self, model):
        x, y = generate_sample(100, GroundTruth(), seed=104, model=model)
        fit = nonlinear_mm(x, y, model, MmOptions(seed=41))
        assert fit.objective <= fit.objective_at_start + 1e-15
        assert np.all(np.diff(fit.objective_trace) <= 1e-15)

    def test_scale_override_descends_from_start(self, model):
        x, y = generate_sample(100, GroundTruth(), seed=105, model=model)
        beta0 = np.array([4.5, 1.9])
        div = np.exp((x + 1.0) ** 2)
        fit = nonlinear_mm(
            x, y, model, MmOptions(seed=51), scale_override=(1.0, div), beta0=beta0
        )
        assert fit.s_scale == 1.0
        assert fit.objective <= fit.objective_at_start + 1e-15
        assert fit.converged

    def test_scale_override_requires_start(self, model):
        x, y = generate_sample(50, GroundTruth(), seed=106, model=model)
        with pytest.raises(ValueError):
            nonlinear_mm(x, y, model, scale_override=(1.0, np.ones(50)))

    def test_scale_override_requires_positive_scale(self, model):
        x, y = generate_sample(50, GroundTruth(), seed=107, model=model)
        with pytest.raises(ValueError):
            nonlinear_mm(
                x, y, model, scale_override=(0.0, np.ones(50)), beta0=np.ones(2)
            )

    def test_vertical_outliers_bounded_influence(self, model):
        # a fifth of the responses dragged to +500 must not move the fit much
        x, y = generate_sample(100, GroundTruth(), seed=108, model=model)
        y_bad = y.copy()
        y_bad[:20] = 500.0
        clean = nonlinear_mm(x, y, model, MmOptions(seed=61))
        dirty = nonlinear_mm(x, y_bad, model, MmOptions(seed=61))
        assert np.linalg.norm(dirty.beta - clean.beta) < 2.0
