import math

import numpy as np
import pytest

from colflat.errors import DomainError, ParameterError
from colflat.experiments import line_fit
from colflat.operators import make_dense, make_identity, scale_op
from colflat.signal_model import gen_sparse_flat_signal
from colflat.solver import solve_constrained
from colflat.widths import (analytic_width_bound, estimate_lambda_min, mc_width_kronecker,
                            mc_width_sq, necessary_measurements, q_xi_estimate,
                            required_measurements)


class TestGaussianWidth:
    def test_scalar_closed_form(self):
        # statistic g^2 1{g < 0}: E = 1/2
        est = mc_width_sq(np.array([[5.0]]), samples=10000, seed=0)
        assert abs(est.mean - 0.5) <= 4 * est.std_error
        assert est.std_error == pytest.approx(est.values.std(ddof=1) / 100)

    def test_ambient_bound(self):
        for n in (2, 3, 5):
            X = gen_sparse_flat_signal(n, 1, seed=n)
            assert mc_width_sq(X, 200, seed=1).mean <= n * n + 1

    def test_monotone_in_s_and_r(self):
        for n in (4, 6, 8):
            w = {(s, r): mc_width_sq(gen_sparse_flat_signal(n, s, r, seed=0), 400, seed=1).mean
                 for s in (1, 2) for r in (1, n)}
            assert w[(2, n)] > w[(1, n)] and w[(2, 1)] > w[(1, 1)]
            assert w[(1, n)] < w[(1, 1)] and w[(2, n)] < w[(2, 1)]

    def test_scaling_law(self):
        x, y = [], []
        for n in (4, 6, 8, 10):
            for s in (1, 2):
                X = gen_sparse_flat_signal(n, s, seed=n + s)
                y.append(mc_width_sq(X, 300, seed=n * 10 + s).mean)
                x.append(n * s * math.log(n))
        a, b, r2 = line_fit(np.array(x), np.array(y))
        assert a > 0 and r2 >= 0.8

    def test_deterministic(self):
        X = gen_sparse_flat_signal(3, 1, seed=0)
        a, b = mc_width_sq(X, 50, seed=9), mc_width_sq(X, 50, seed=9)
        np.testing.assert_array_equal(a.values, b.values)

    def test_errors(self):
        with pytest.raises(ParameterError):
            mc_width_sq(np.zeros((2, 2)), 10)
        with pytest.raises(ParameterError):
            mc_width_sq(np.eye(2), 1)


class TestKroneckerWidth:
    def test_nonneg_and_cauchy_schwarz(self):
        X = gen_sparse_flat_signal(4, 1, seed=0)
        est = mc_width_kronecker(X, 6, "gaussian", 300, seed=0)
        assert np.all(est.values >= 0)
        assert np.all(est.values <= est.extra["frobenius_values"] + 1e-12)
        assert est.mean <= est.extra["mean_frobenius"]

    @pytest.mark.parametrize("dist", ["rademacher", "uniform"])
    def test_dists(self, dist):
        X = gen_sparse_flat_signal(3, 1, seed=1)
        est = mc_width_kronecker(X, 4, dist, 50, seed=2)
        assert est.kind == "kronecker_width" and est.samples == 50

    def test_deterministic(self):
        X = gen_sparse_flat_signal(3, 1, seed=1)
        a = mc_width_kronecker(X, 4, "gaussian", 30, seed=3)
        b = mc_width_kronecker(X, 4, "gaussian", 30, seed=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_errors(self):
        with pytest.raises(ParameterError):
            mc_width_kronecker(np.zeros((2, 2)), 3)
        with pytest.raises(ParameterError):
            mc_width_kronecker(np.eye(2), 0)


class TestQXi:
    def test_second_moment(self):
        est = q_xi_estimate("gaussian", 4, directions=5, samples=10000, seed=0)
        sm, se = est.extra["second_moment"], est.extra["second_moment_se"]
        assert abs(sm - 1.0) <= 4 * se

    def test_range_and_floor(self):
        est = q_xi_estimate("gaussian", 4, directions=10, samples=10000, seed=1)
        assert 0.0 <= est.mean <= 1.0
        assert est.mean >= 0.05

    def test_errors(self):
        with pytest.raises(ParameterError):
            q_xi_estimate("gaussian", 3, directions=0)
        with pytest.raises(ParameterError):
            q_xi_estimate("cauchy", 3)


class TestLambdaMin:
    def test_identity(self):
        X = gen_sparse_flat_signal(3, 1, seed=0)
        est = estimate_lambda_min(make_identity(3), X, 300, seed=0)
        assert est.mean == pytest.approx(1.0, abs=1e-12)
        assert est.extra["audit_failures"] == 0

    def test_scaled_identity(self):
        X = gen_sparse_flat_signal(3, 2, seed=0)
        est = estimate_lambda_min(scale_op(make_identity(3), 2.5), X, 300, seed=0)
        assert est.mean == pytest.approx(2.5, abs=1e-12)

    def test_audit_dense(self):
        X = gen_sparse_flat_signal(4, 2, 2, seed=3)
        est = estimate_lambda_min(make_dense(10, 4, seed=0), X, 1000, seed=1)
        assert est.extra["audit_failures"] == 0 and est.mean >= 0

    def test_error_bound_audit(self):
        rng = np.random.default_rng(5)
        n, eta = 3, 0.05
        for _ in range(4):
            op = make_dense(12, n, seed=rng)
            X = gen_sparse_flat_signal(n, 1, seed=rng)
            lam = estimate_lambda_min(op, X, 10000, seed=rng).mean
            E = rng.standard_normal(12)
            E *= eta / np.linalg.norm(E)
            res = solve_constrained(op, op.apply(X) + E, eta)
            assert np.linalg.norm(res.minimizer - X) <= 2 * eta / lam + 1e-8


class TestClosedForms:
    def test_gaussian_width_bound(self):
        v = analytic_width_bound(10, 2, 10, 1.0, "gaussian")
        assert v == pytest.approx(1 + 20 * math.log(1e6), rel=1e-12)
        assert v == pytest.approx(277.3, abs=0.05)

    def test_kronecker_width_bound(self):
        v = analytic_width_bound(10, 2, 10, 1.0, "kronecker_gaussian")
        assert v == pytest.approx(1 + 20 * math.log(1e3) ** 2, rel=1e-12)
        # 1 + 20 ln^2(1000) = 955.34 (not 955.1)
        assert v == pytest.approx(955.34, abs=0.01)

    def test_subgaussian_unit(self):
        a = analytic_width_bound(8, 2, 8, 1.0, "kronecker_subgaussian", 1.0, 1.0)
        assert a == analytic_width_bound(8, 2, 8, 1.0, "kronecker_gaussian")
        b = analytic_width_bound(8, 2, 8, 1.0, "kronecker_subgaussian", 2.0, 0.5)
        assert b == pytest.approx(a)

    def test_width_domain(self):
        with pytest.raises(DomainError):
            analytic_width_bound(1, 1, 1, 1.0, "gaussian")
        with pytest.raises(DomainError):
            analytic_width_bound(1, 1, 1, 0.5, "kronecker_gaussian")
        with pytest.raises(ParameterError):
            analytic_width_bound(4, 5, 1)
        with pytest.raises(ParameterError):
            analytic_width_bound(4, 1, 1, family="laplace")

    def test_required_gaussian(self):
        b = required_measurements("gaussian", 10, 2, eta=0.0, t=1.0)
        assert b.m == pytest.approx((1 + math.sqrt(20 * math.log(1e6))) ** 2, rel=1e-12)
        assert b.m == pytest.approx(310.5, abs=0.1) and not b.side

    def test_required_kronecker(self):
        b = required_measurements("kronecker_gaussian", 10, 2, eta=0.3, delta=0.3, t=1.0)
        assert b.m == pytest.approx(1 + 4 * math.sqrt(2) + math.sqrt(20) * math.log(1e3), rel=1e-12)
        assert b.m == pytest.approx(37.5, abs=0.1)
        assert b.side and b.total == pytest.approx(b.m ** 2)

    def test_eta_zero_removes_noise(self):
        sub = {"alpha": 0.5, "rho": 1.2, "sigma": 1.0}
        for fam, c in (("gaussian", None), ("subgaussian", sub), ("kronecker_gaussian", None),
                       ("kronecker_subgaussian", {"sigma_a": 2.0, "sigma_b": 1.0})):
            base = required_measurements(fam, 8, 1, eta=0.0, delta=0.5, t=0.0, constants=c).m
            noisy = required_measurements(fam, 8, 1, eta=0.2, delta=0.5, t=0.0, constants=c).m
            assert noisy > base
            assert required_measurements(fam, 8, 1, eta=0.0, delta=7.0, t=0.0, constants=c).m == base

    def test_subgaussian_needs_constants(self):
        with pytest.raises(ParameterError):
            required_measurements("subgaussian", 8, 1, constants={"alpha": 1.0})
        v = required_measurements("subgaussian", 8, 1, t=0.0,
                                  constants={"alpha": 1.0, "rho": 1.0, "sigma": 1.0}).m
        assert v == pytest.approx(required_measurements("gaussian", 8, 1).m)

    def test_required_errors(self):
        with pytest.raises(ParameterError):
            required_measurements("gaussian", 8, 1, delta=0.0)
        with pytest.raises(ParameterError):
            required_measurements("gaussian", 8, 1, constants={"C": -1.0})
        with pytest.raises(ParameterError):
            required_measurements("bernoulli", 8, 1)

    def test_necessary(self):
        assert necessary_measurements(16, 2) == pytest.approx(32 * math.log(2) / (2 * math.log(3)))
        assert necessary_measurements(16, 2) == pytest.approx(10.09, abs=0.01)
        assert necessary_measurements(8, 2) == 0.0
        with pytest.raises(DomainError):
            necessary_measurements(7, 2)
        vals = [necessary_measurements(n, 2) for n in range(8, 40)]
        assert np.all(np.diff(vals) > 0)
