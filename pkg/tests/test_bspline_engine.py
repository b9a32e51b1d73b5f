import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from besovnet.bspline_engine import (
    BSplineIndex,
    FitError,
    PlanError,
    SplineApproximant,
    dense_count,
    eval_approximant,
    eval_psi,
    eval_psi_truncated_power,
    eval_tensor_bspline,
    fit_coefficients,
    make_plan,
    quasi_norm,
)


def scipy_psi(m, x):
    """Oracle: scipy's basis element on the integer knots 0..m+1."""
    b = BSpline.basis_element(np.arange(m + 2, dtype=float), extrapolate=False)
    return np.nan_to_num(b(np.asarray(x, dtype=float)), nan=0.0)


def approximant(ks, js, alphas, m=1, d=1):
    return SplineApproximant(m, d, np.asarray(ks, dtype=np.int64), np.asarray(js, dtype=np.int64).reshape(len(ks), d),
                             np.asarray(alphas, dtype=np.float64))


class TestPsi:
    def test_order_zero_is_unit_box(self):
        assert eval_psi(0, 0.5) == 1.0
        assert eval_psi(0, 1.5) == 0.0

    def test_hat_peak(self):
        assert eval_psi(1, 1.0) == 1.0

    @pytest.mark.parametrize("m", range(6))
    def test_zero_outside_support(self, m):
        assert eval_psi(m, -0.1) == 0.0
        assert eval_psi(m, m + 1.1) == 0.0

    @pytest.mark.parametrize("m", range(1, 6))
    def test_matches_scipy_basis_element(self, m):
        x = np.linspace(-0.5, m + 1.5, 1001)
        np.testing.assert_allclose(eval_psi(m, x), scipy_psi(m, x), atol=1e-12)

    @pytest.mark.parametrize("m", range(5))
    def test_recursion_agrees_with_truncated_powers(self, m):
        x = np.linspace(0, m + 1, 777)
        np.testing.assert_allclose(eval_psi(m, x), eval_psi_truncated_power(m, x), atol=1e-10)

    @pytest.mark.parametrize("m,k", [(m, k) for m in range(5) for k in (0, 2, 4) if m <= 2 ** k])
    def test_partition_of_unity(self, m, k):
        x = np.linspace(m * 2.0 ** -k, 1.0, 501)
        total = sum(eval_psi(m, 2.0 ** k * x - j) for j in range(-m - 1, 2 ** k + 1))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)


class TestTensorBSpline:
    def test_reduces_to_psi(self):
        x = np.linspace(0, 1, 50)
        idx = BSplineIndex(0, (0,), 3)
        np.testing.assert_array_equal(eval_tensor_bspline(idx, x[:, None]), eval_psi(3, x))

    def test_product_of_hat_peaks(self):
        assert eval_tensor_bspline(BSplineIndex(1, (0, 0), 1), np.array([0.5, 0.5])) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 4), st.integers(0, 3), st.integers(-3, 8), st.integers(-3, 8), st.integers(0, 2**31))
    def test_exact_zero_outside_support(self, k, m, j1, j2, seed):
        idx = BSplineIndex(k, (j1, j2), m)
        box = np.asarray(idx.support())
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 2, (200, 2))
        outside = np.any((X < box[:, 0]) | (X > box[:, 1]), axis=1)
        assert np.all(eval_tensor_bspline(idx, X)[outside] == 0.0)


class TestPlan:
    @pytest.mark.parametrize("N", [100, 1000, 10000])
    @pytest.mark.parametrize("d,s,p", [(1, 2.0, 2.0), (2, 2.0, 2.0), (2, 3.0, 1.5)])
    def test_budget_respected(self, N, d, s, p):
        plan = make_plan(N, d, s, p=p)
        assert plan.dense_terms == dense_count(plan.H, plan.m, d)
        assert plan.total <= N

    def test_cutoff_formulas(self):
        plan = make_plan(5000, 2, 3.0, p=1.5)
        assert plan.H == math.ceil(plan.c1 * math.log(5000) / 2)
        assert plan.nu == pytest.approx((3.0 - 2 / 1.5) / (2 * 2 / 1.5))
        assert plan.H_star == math.ceil(math.log(plan.lam * 5000) / plan.nu) + plan.H + 1
        for k, n in plan.n_k.items():
            assert n <= math.ceil(plan.lam * 5000 * 2.0 ** (-plan.nu * (k - plan.H)))

    def test_dense_scale_grows_with_log_budget(self):
        Ns = [10 ** e for e in range(2, 7)]
        Hs = [make_plan(N, 1, 2.0, p=2.0, c1=1.0).H for N in Ns]
        slope = np.polyfit(np.log(Ns), Hs, 1)[0]
        assert slope == pytest.approx(1.0, abs=0.15)

    def test_default_order(self):
        plan = make_plan(200, 1, 2.0, p=1.0)
        assert plan.m == 3 and 2.0 < min(plan.m, plan.m - 1 + 1.0)

    def test_smoothness_precondition(self):
        with pytest.raises(PlanError):
            make_plan(100, 2, 0.5, p=2.0)
        with pytest.raises(PlanError):
            make_plan(100, 1, 3.0, p=2.0, m=2)


class TestFit:
    def test_zero_target(self):
        appr = fit_coefficients(lambda X: np.zeros(len(X)), make_plan(64, 1, 2.0))
        assert np.all(appr.alphas == 0.0)

    @pytest.mark.parametrize("d,N", [(1, 64), (2, 400)])
    def test_single_basis_function_recovered(self, d, N):
        plan = make_plan(N, d, 2.0)
        target_idx = BSplineIndex(1, (0,) * d, plan.m)
        appr = fit_coefficients(lambda X: eval_tensor_bspline(target_idx, X), plan)
        hit = (appr.ks == 1) & np.all(appr.js == 0, axis=1)
        assert abs(appr.alphas[hit].sum() - 1.0) <= 1e-8
        assert np.max(np.abs(appr.alphas[~hit]), initial=0.0) <= 1e-8
        assert appr.residual_sup <= 1e-8

    def test_error_decreases_with_budget(self):
        f = lambda X: np.sin(2 * np.pi * np.asarray(X)[:, 0])
        x = np.linspace(0, 1, 20001)[:, None]
        Ns = [64, 256, 1024]
        errs = [np.max(np.abs(eval_approximant(fit_coefficients(f, make_plan(N, 1, 2.0)), x) - f(x))) for N in Ns]
        assert errs[0] > errs[1] > errs[2]
        slope = np.polyfit(np.log(Ns), np.log(errs), 1)[0]
        assert slope <= -2.0 * 0.7

    def test_coefficient_cap_rejects(self):
        with pytest.raises(FitError, match="exceeds the cap"):
            fit_coefficients(lambda X: 50.0 * np.ones(len(X)), make_plan(64, 1, 2.0), coef_cap=1.0)

    def test_norm_recorded(self):
        appr = fit_coefficients(lambda X: np.cos(3 * np.asarray(X)[:, 0]), make_plan(128, 1, 2.0))
        assert math.isfinite(appr.norm_value) and appr.norm_value > 0


class TestEvalApproximant:
    def test_empty(self):
        assert eval_approximant(approximant([], [], []), 0.3) == 0.0

    def test_single_term_at_peak(self):
        assert eval_approximant(approximant([1], [[0]], [2.0]), 0.5) == 2.0

    def test_random_against_term_by_term_sum(self):
        rng = np.random.default_rng(0)
        n = 40
        ks = rng.integers(0, 4, n)
        js = np.array([[rng.integers(-2, 2 ** k)] for k in ks])
        ks2 = rng.integers(0, 3, n)
        js2 = np.stack([[rng.integers(-2, 2 ** k) for _ in range(2)] for k in ks2])
        alphas = rng.standard_normal(n)
        for ks_, js_, d in ((ks, js, 1), (ks2, js2, 2)):
            appr = approximant(ks_, js_, alphas, m=2, d=d)
            X = rng.uniform(0, 1, (300, d))
            ref = np.zeros(300)
            for idx, a in reversed(list(appr.terms())):
                ref += a * eval_tensor_bspline(idx, X)
            np.testing.assert_allclose(eval_approximant(appr, X), ref, atol=1e-12)


class TestQuasiNorm:
    def test_single_coefficient(self):
        appr = approximant([3], [[1]], [-0.5])
        assert quasi_norm(appr, 2.0, 2.0, 2.0) == pytest.approx(0.5 * 2.0 ** (3 * (2.0 - 0.5)), rel=1e-14)

    def test_all_zero(self):
        assert quasi_norm(approximant([0, 1], [[0], [1]], [0.0, 0.0]), 2.0, 2.0, 2.0) == 0.0

    def test_sup_form(self):
        appr = approximant([0, 0, 2, 2], [[0], [1], [0], [3]], [1.0, -3.0, 0.25, 0.5])
        expect = max(3.0, 2.0 ** (2 * 1.5) * 0.5)
        assert quasi_norm(appr, 1.5, math.inf, math.inf) == expect
