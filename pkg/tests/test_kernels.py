import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetmm.kernels import (
    BISQUARE_C_SCALE,
    BisquareRho,
    UNIFORM_MAD_FACTOR,
    median_mad,
)


class TestRho:
    def test_zero(self):
        assert BisquareRho(BISQUARE_C_SCALE).rho(0.0) == 0.0

    def test_boundary_value_is_one(self):
        spec = BisquareRho(BISQUARE_C_SCALE)
        assert spec.rho(spec.c) == pytest.approx(1.0)
        assert spec.rho(-spec.c) == pytest.approx(1.0)

    def test_closed_form_interior_point(self):
        # 1 - (1 - (1/2)^2)^3 evaluated by hand
        assert BisquareRho(2.0).rho(1.0) == pytest.approx(0.578125, abs=1e-15)

    def test_interior_matches_psi_quadrature(self):
        # independent oracle: rho(t) = integral of psi from 0 to t
        spec = BisquareRho(2.0)
        ts = np.linspace(0.0, 2.0, 2001)
        psi_vals = spec.psi(ts)
        integral = np.trapezoid(psi_vals, ts)
        assert integral == pytest.approx(spec.rho(2.0), abs=1e-6)

    def test_even_and_monotone_on_grid(self):
        spec = BisquareRho(BISQUARE_C_SCALE)
        t = np.linspace(0.0, spec.c, 10_000)
        vals = spec.rho(t)
        assert np.all(np.diff(vals) >= 0.0)
        assert np.array_equal(spec.rho(-t), vals)

    def test_bounded_by_one(self):
        spec = BisquareRho(1.0)
        t = np.linspace(-10, 10, 1001)
        v = spec.rho(t)
        assert np.all((v >= 0.0) & (v <= 1.0))

    def test_invalid_tuning_constant(self):
        with pytest.raises(ValueError):
            BisquareRho(0.0)
        with pytest.raises(ValueError):
            BisquareRho(-1.0)


class TestPsi:
    def test_odd_at_zero_and_beyond_support(self):
        spec = BisquareRho(BISQUARE_C_SCALE)
        assert spec.psi(0.0) == 0.0
        assert spec.psi(2.0) == 0.0
        assert spec.psi(-2.0) == 0.0

    def test_closed_form_interior_point(self):
        # 6 * 1 * (1 - 0.25)^2 / 4
        assert BisquareRho(2.0).psi(1.0) == pytest.approx(0.84375, abs=1e-15)

    def test_matches_finite_difference_of_rho(self):
        spec = BisquareRho(BISQUARE_C_SCALE)
        h = 1e-6
        t = np.linspace(-2 * spec.c, 2 * spec.c, 4001)
        t = t[np.abs(np.abs(t) - spec.c) > 1e-4]  # fd is one-sided at the kink
        fd = (spec.rho(t + h) - spec.rho(t - h)) / (2 * h)
        assert np.max(np.abs(spec.psi(t) - fd)) < 1e-6

    @given(st.floats(-20, 20), st.floats(0.5, 10))
    def test_odd_symmetry(self, t, c):
        spec = BisquareRho(c)
        assert spec.psi(-t) == pytest.approx(-spec.psi(t), abs=1e-12)


class TestWeight:
    def test_normalized_at_zero(self):
        assert BisquareRho(3.841).weight(0.0) == 1.0

    def test_zero_beyond_support(self):
        assert BisquareRho(3.841).weight(5.0) == 0.0

    def test_closed_form_half_support(self):
        # t/c = 1/2 exactly: (1 - 0.25)^2
        assert BisquareRho(3.841).weight(1.9205) == pytest.approx(0.5625, abs=1e-12)

    def test_continuity_at_zero(self):
        assert abs(BisquareRho(3.841).weight(1e-6) - 1.0) < 1e-8

    def test_proportional_to_psi_ratio(self):
        # weight is psi(t)/t rescaled by its limit 6/c^2 at zero
        spec = BisquareRho(2.5)
        t = np.linspace(0.05, 2.45, 97)
        ratio = spec.psi(t) / t
        assert np.allclose(spec.weight(t), ratio / (6.0 / spec.c**2), atol=1e-12)

    def test_non_increasing_on_support(self):
        spec = BisquareRho(3.841)
        t = np.linspace(0.0, spec.c, 10_000)
        assert np.all(np.diff(spec.weight(t)) <= 0.0)


class TestMedianMad:
    def test_symmetric_integer_sample(self):
        ls = median_mad([1, 2, 3, 4, 5], 1.0)
        assert ls.location == 3.0
        assert ls.scale == 1.0

    def test_singleton(self):
        ls = median_mad([7.0], 1.0)
        assert ls.location == 7.0
        assert ls.scale == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            median_mad([])

    def test_uniform_consistency_factor(self):
        # sd of U(0,1) is 1/sqrt(12); the 4/sqrt(12) factor calibrates the MAD
        rng = np.random.default_rng(1234)
        ls = median_mad(rng.uniform(0, 1, 100_000), UNIFORM_MAD_FACTOR)
        assert ls.scale == pytest.approx(1.0 / math.sqrt(12.0), abs=0.01)

    @given(
        st.lists(st.integers(-50, 50), min_size=1, max_size=40),
        st.sampled_from([0.5, 2.0, 8.0]),
        st.integers(-5, 5),
    )
    def test_affine_equivariance(self, sample, a, b):
        # powers of two and integer shifts keep the arithmetic exact
        base = median_mad(np.asarray(sample, dtype=float))
        moved = median_mad(a * np.asarray(sample, dtype=float) + b)
        assert moved.scale == a * base.scale
        assert moved.location == a * base.location + b
