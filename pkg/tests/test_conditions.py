import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from colflat.conditions import (check_erc, check_flatness_condition, compute_mrip_constants,
                                estimate_nsp_ratio, estimate_robust_nsp, matrix_norm, nsp_ratio,
                                opnorm_exotic, rip_to_nsp_constants, thm41_report)
from colflat.errors import ConditionViolatedError, ParameterError, SingularityError
from colflat.norms import norm_colmax_l1
from colflat.operators import DenseOp, make_dense, make_identity, scale_op
from colflat.signal_model import SparsityPattern, gen_sparse_flat_signal
from colflat.solver import solve_constrained

TAGS = ("l1", "dual", "max", "sum", "fro")
DUAL = {"l1": "dual", "dual": "l1", "max": "sum", "sum": "max", "fro": "fro"}


def block_column_op(n, eps, seed):
    """Each column is measured by its own n x n block ``I + eps G_j``: images of distinct columns are orthogonal."""
    rng = np.random.default_rng(seed)
    P = np.zeros((n * n, n * n))
    for j in range(n):
        B = np.eye(n) + eps * rng.standard_normal((n, n))
        for r in range(n):
            for i in range(n):
                P[j * n + r, i * n + j] = B[r, i]
    return DenseOp(P)


def flat_kernel_op(n, h=None):
    """Rows spanning the orthogonal complement of one kernel direction ``h``."""
    h = np.full(n * n, 1.0) if h is None else np.asarray(h, dtype=float)
    h = h / np.linalg.norm(h)
    Q, _ = np.linalg.qr(np.column_stack([h, np.eye(n * n)]))
    return DenseOp(Q[:, 1:n * n].T), h.reshape(n, n)


class TestNSP:
    def test_identity(self):
        rep = estimate_nsp_ratio(make_identity(3), 1)
        assert rep.passed and rep.constants["rho"] == 0.0

    def test_huge_kernel_fails(self):
        # m = 1, n = 2: H = e_00 - (a_00/a_01) e_01 style elements make the ratio arbitrarily large
        op = DenseOp([[1.0, 2.0, -1.0, 0.5]])
        rep = estimate_nsp_ratio(op, 1)
        assert not rep.passed and rep.constants["rho"] >= 1.0
        assert rep.method == "exact-enumeration"
        # explicit kernel element: column 0 carries everything on S
        H = np.array([[2.0, -1.0], [0.0, 0.0]])
        assert abs(op.apply(H)[0]) < 1e-15
        assert nsp_ratio(H, s=1) == math.inf

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_witness_replay(self, seed):
        rep = estimate_nsp_ratio(make_dense(12, 4, seed=seed), 1, seed=seed)
        H, S = rep.witness["H"], rep.witness["S"]
        assert nsp_ratio(H, S) == pytest.approx(rep.constants["rho"], abs=1e-10)
        assert nsp_ratio(H, s=1) == pytest.approx(rep.constants["rho"], abs=1e-10)

    def test_flat_kernel_exact_value(self):
        # kernel spanned by the all-ones matrix: every pattern gives s/(n-s)
        op, _ = flat_kernel_op(3)
        rep = estimate_nsp_ratio(op, 1)
        assert rep.constants["rho"] == pytest.approx(0.5, abs=1e-9)

    def test_sampled_mode_is_lower_bound(self):
        op = make_dense(20, 5, seed=3)
        rep = estimate_nsp_ratio(op, 1, trials=10, seed=0)
        assert rep.method == "sampled-lower-bound"
        assert nsp_ratio(rep.witness["H"], s=1) == pytest.approx(rep.constants["rho"], abs=1e-10)
        assert np.linalg.norm(op.apply(rep.witness["H"])) <= 1e-8 * np.linalg.norm(rep.witness["H"])

    def test_nonuniform_diagnostic(self):
        op, h = flat_kernel_op(3)
        X = np.diag([1.0, -1.0, 1.0])
        rep = estimate_nsp_ratio(op, 1, X=X)
        # |sum_j lam_j <h_Sj, sgn x_j>| / ||h_-S||_1 with lam uniform and h = ones/3
        expect = abs((1 - 1 + 1) / 3 * h[0, 0]) / (2 * h[0, 0])
        assert rep.constants["nonuniform_ratio"] == pytest.approx(expect, abs=1e-9)


class TestRobustNSP:
    def test_identity_replay(self):
        op = make_identity(3)
        rep = estimate_robust_nsp(op, 1, seed=4)
        assert rep.method == "sampled-estimate"
        assert rep.constants["rho"] == pytest.approx(0.1)
        H = rep.witness["H"]
        srt = -np.sort(-np.abs(H), axis=0)
        a, b = srt[:1].sum(axis=0).max(), srt[1:].sum(axis=0).max()
        assert (a - 0.1 * b) / np.linalg.norm(H) == pytest.approx(rep.constants["beta"], abs=1e-10)

    def test_scaling_halves_beta(self):
        op = make_dense(12, 3, seed=5)
        b1 = estimate_robust_nsp(op, 1, trials=200, seed=1).witness["beta_grid"]
        b2 = estimate_robust_nsp(scale_op(op, 2.0), 1, trials=200, seed=1).witness["beta_grid"]
        np.testing.assert_allclose(np.asarray(b2), np.asarray(b1) / 2, rtol=1e-9)

    def test_kernel_consistency(self):
        op = make_dense(7, 3, seed=6)
        nsp = estimate_nsp_ratio(op, 1).constants["rho"]
        rep = estimate_robust_nsp(op, 1, trials=300, seed=2)
        grid = np.asarray(rep.witness["rho_grid"])
        betas = np.asarray(rep.witness["beta_grid"])
        # grid points above the NSP value admit a finite beta; the sampled kernel can only be looser
        assert np.all(np.isfinite(betas[grid > nsp + 1e-9]))
        if rep.passed:
            assert rep.constants["rho"] >= 0.0

    def test_fit_holds_on_samples(self):
        op = make_dense(10, 3, seed=7)
        extra = [np.random.default_rng(k).standard_normal((3, 3)) for k in range(20)]
        rep = estimate_robust_nsp(op, 1, trials=100, seed=0, extra_H=extra)
        rho, beta = rep.constants["rho"], rep.constants["beta"]
        for H in extra:
            srt = -np.sort(-np.abs(H), axis=0)
            lhs = srt[:1].sum(axis=0).max()
            rhs = rho * srt[1:].sum(axis=0).max() + beta * np.linalg.norm(op.apply(H))
            assert lhs <= rhs * (1 + 1e-12)


class TestMRIP:
    def test_identity(self):
        rep = compute_mrip_constants(make_identity(3), 1)
        assert rep.constants["delta_s"] == pytest.approx(0.0, abs=1e-12)
        assert rep.constants["Delta_s"] == 0.0 and rep.passed

    @pytest.mark.parametrize("c", [0.5, 0.9, 1.3])
    def test_scaled_identity(self, c):
        rep = compute_mrip_constants(scale_op(make_identity(3), c), 2)
        assert rep.constants["delta_s"] == pytest.approx(abs(c * c - 1), abs=1e-12)

    def test_svd_oracle(self):
        op = make_dense(9, 3, seed=8)
        rep = compute_mrip_constants(op, 1)
        Phi = op.matrix()
        worst = 0.0
        for rows in itertools.product(range(3), repeat=3):
            idx = [rows[j] * 3 + j for j in range(3)]
            sv = np.linalg.svd(Phi[:, idx], compute_uv=False)
            worst = max(worst, abs(sv[0] ** 2 - 1), abs(1 - sv[-1] ** 2))
        assert rep.constants["delta_s"] == pytest.approx(worst, abs=1e-10)
        assert rep.method == "exact-enumeration"

    def test_generic_cross_column_infinite(self):
        op = make_dense(9, 3, seed=8)
        rep = compute_mrip_constants(op, 1)
        assert math.isinf(rep.constants["Delta_s"]) and not rep.passed
        (i, j), (k, l) = rep.witness["Delta_pair"]["Z"], rep.witness["Delta_pair"]["W"]
        assert j != l
        Z, W = np.zeros((3, 3)), np.zeros((3, 3))
        Z[i, j], W[k, l] = 1.0, 1.0
        assert abs(op.apply(Z) @ op.apply(W)) > 0

    def test_block_op_brute_force(self):
        n = 3
        op = block_column_op(n, 0.05, 9)
        rep = compute_mrip_constants(op, 1)
        # brute force n <Phi Z, Phi W> / sum_j |z_j||w_j| over unit vectors on disjoint rows of one column
        G = op.matrix().T @ op.matrix()
        best = 0.0
        for j in range(n):
            for a in range(n):
                for b in range(n):
                    if a != b:
                        best = max(best, n * abs(G[a * n + j, b * n + j]))
        assert rep.constants["Delta_s"] == pytest.approx(best, abs=1e-12)


class TestRipToNsp:
    def test_example(self):
        rho, beta = rip_to_nsp_constants(0.2, 0.4, 4)
        assert rho == pytest.approx(0.4 / 0.7, abs=1e-12)
        assert beta == pytest.approx(2 * math.sqrt(1.2) / 0.7, abs=1e-12)
        assert rho == pytest.approx(0.5714, abs=1e-4) and beta == pytest.approx(3.130, abs=1e-3)

    def test_isometry(self):
        assert rip_to_nsp_constants(0.0, 0.0, 9) == (0.0, 3.0)

    def test_violated(self):
        with pytest.raises(ConditionViolatedError):
            rip_to_nsp_constants(0.9, 0.4, 1)

    @settings(max_examples=300)
    @given(st.floats(0, 0.99), st.floats(0, 4))
    def test_equivalence(self, d, D):
        if 1 - d - D / 4 <= 1e-9 or abs(d + 1.25 * D - 1) < 1e-9:
            return
        rho, _ = rip_to_nsp_constants(d, D, 1)
        assert (rho < 1) == (d + 1.25 * D < 1)


class TestFlatness:
    def test_one_dimensional_pass(self):
        op = DenseOp([[1.0, 2.0, 0.0, 0.0]])
        S = SparsityPattern(((0,), (0,)), 1)
        assert check_flatness_condition(op, S).passed

    def test_zero_column_fails(self):
        op = DenseOp([[1.0, 0.0, 3.0, 4.0]])
        S = SparsityPattern(((0,), (0,)), 1)
        rep = check_flatness_condition(op, S)
        assert not rep.passed and rep.constants["min_rank"] == 0

    def test_structural_note(self):
        rep = check_flatness_condition(make_dense(8, 3, seed=0), SparsityPattern.diagonal(3))
        assert not rep.passed and rep.constants["min_rank"] <= 1
        assert any("structurally" in s for s in rep.notes)

    def test_residual_variant(self):
        op = make_dense(8, 3, seed=0)
        S = SparsityPattern.diagonal(3)
        z = np.random.default_rng(0).standard_normal(8)
        rep = check_flatness_condition(op, S, z=z)
        expect = np.abs(np.diag(op.adjoint(z))).min()
        assert rep.constants["residual_min_colmax"] == pytest.approx(expect, abs=1e-12)
        assert rep.constants["residual_pass"]


class TestOpNorm:
    @pytest.mark.parametrize("tag", TAGS)
    def test_identity(self, tag):
        assert opnorm_exotic(np.eye(9), tag, tag) == pytest.approx(1.0, abs=1e-12)
        assert opnorm_exotic(2 * np.eye(9), tag, tag) == pytest.approx(2.0, abs=1e-12)

    def test_exact_vs_sampled(self):
        T = np.random.default_rng(10).standard_normal((4, 4))
        ex = opnorm_exotic(T, "l1", "l1", mode="exact")
        sa = opnorm_exotic(T, "l1", "l1", mode="sampled", starts=2000, seed=1)
        assert sa == pytest.approx(ex, abs=1e-8)
        # independent oracle: maximize the convex target over a dense sample of the ball
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((100000, 2, 2))
        Z /= np.abs(Z).sum(axis=1, keepdims=True).max(axis=2, keepdims=True)
        img = (Z.reshape(-1, 4) @ T.T).reshape(-1, 2, 2)
        assert np.abs(img).sum(axis=1).max(axis=1).max() <= ex + 1e-12

    @pytest.mark.parametrize("src,tgt", [(a, b) for a in TAGS for b in TAGS])
    def test_duality(self, src, tgt):
        T = np.random.default_rng(11).standard_normal((4, 4))
        a = opnorm_exotic(T, src, tgt, mode="exact" if src != "fro" else "auto")
        b = opnorm_exotic(T.T, DUAL[tgt], DUAL[src], mode="exact" if tgt != "fro" else "auto")
        assert a == pytest.approx(b, abs=1e-8)

    def test_witness(self):
        T = np.random.default_rng(12).standard_normal((9, 9))
        res = opnorm_exotic(T, "dual", "max", details=True)
        assert matrix_norm(res.witness.reshape(3, 3), "dual") == pytest.approx(1.0)
        assert matrix_norm((T @ res.witness).reshape(3, 3), "max") == pytest.approx(res.value, abs=1e-12)

    def test_bad_tags(self):
        with pytest.raises(ParameterError):
            opnorm_exotic(np.eye(4), "nuclear", "l1")
        with pytest.raises(ParameterError):
            opnorm_exotic(np.eye(4), "l1", "l1", mode="fast")


class TestERC:
    def test_zero_composite(self):
        n = 2
        S = SparsityPattern.diagonal(n)
        cols = S.flat_indices()
        P = np.zeros((2, 4))
        P[0, cols[0]], P[1, cols[1]] = 1.0, 1.0
        rep = check_erc(DenseOp(P), S)
        assert rep.constants["rho_erc"] == 0.0 and rep.passed

    def test_identity(self):
        rep = check_erc(make_identity(3), 1)
        assert rep.constants["rho_erc"] == 0.0 and rep.passed

    def test_flat_kernel_value(self):
        op, _ = flat_kernel_op(3)
        rep = check_erc(op, SparsityPattern.diagonal(3))
        # composite is -(1/(1-|h_S|^2)) h_S <h_-S, .>: value 1.5 * (1/3) * 3 * (1/3)
        assert rep.constants["rho_erc"] == pytest.approx(0.5, abs=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_erc_implies_nsp(self, seed):
        rng = np.random.default_rng(seed)
        h = 1.0 + 0.1 * rng.standard_normal(9)
        op, _ = flat_kernel_op(3, h)
        erc = check_erc(op, 1)
        assert erc.passed
        nsp = estimate_nsp_ratio(op, 1)
        assert nsp.constants["rho"] <= erc.constants["rho_erc"] + 1e-6

    def test_singular(self):
        with pytest.raises(SingularityError):
            check_erc(DenseOp([[1.0, 0, 0, 0]]), SparsityPattern.diagonal(2))


class TestStabilityReport:
    def test_identity(self):
        n, eta = 3, 0.7
        rep = thm41_report(make_identity(n), SparsityPattern.diagonal(n), eta)
        c = rep.constants
        assert c["A_min_range"] == pytest.approx(1.0, abs=1e-6)
        assert c["A_min"] == 0.0
        for k in ("robust_fro", "robust_l1", "robust_max"):
            assert c[k] == pytest.approx(2.0, abs=1e-12)
        assert c["N_erc_dual"] == 0.0
        # z -> z restricted to off-support coordinates, measured in the dual norm
        assert c["N_left"] == pytest.approx(math.sqrt(n), abs=1e-9)
        assert c["sign_threshold"] == pytest.approx(eta * (1 + math.sqrt(n)), abs=1e-9)

    def test_square_identity_cond3(self):
        # m = |S|: Phi_S Phi_S^{*-1} = I, so the left side vanishes
        op = DenseOp(np.eye(4)[[0, 3]])
        rep = thm41_report(op, SparsityPattern.diagonal(2), 1.0)
        assert rep.constants["N_left"] == 0.0
        assert rep.constants["cond3_pass"] and rep.constants["sign_threshold"] == pytest.approx(1 + math.sqrt(2))

    @pytest.mark.parametrize("c", [0.5, 3.0])
    def test_scaling(self, c):
        op = make_dense(8, 3, seed=13)
        S = SparsityPattern.diagonal(3)
        t1 = thm41_report(op, S, 1.0, starts=20).constants["sign_threshold"]
        t2 = thm41_report(scale_op(op, c), S, 1.0, starts=20).constants["sign_threshold"]
        assert t2 == pytest.approx(t1 / c, rel=1e-9)

    def test_amin_witness(self):
        op = make_dense(3, 3, seed=14)
        S = SparsityPattern.diagonal(3)
        rep = thm41_report(op, S, 1.0, starts=50)
        z = rep.witness["A_min_z"]
        PhiS = op.columns(S.flat_indices())
        V = np.zeros(9)
        V[S.flat_indices()] = PhiS.T @ z
        from colflat.norms import dual_norm
        assert dual_norm(V.reshape(3, 3)) == pytest.approx(rep.constants["A_min"], abs=1e-10)
        assert np.linalg.norm(z) == pytest.approx(1.0)

    def test_singular(self):
        with pytest.raises(SingularityError):
            thm41_report(DenseOp([[1.0, 1.0, 0, 0]]), SparsityPattern.full(2), 1.0)


class TestImplicationChain:
    @pytest.mark.parametrize("seed", range(3))
    def test_mrip_to_error_bound(self, seed):
        n, s, eta = 3, 1, 0.05
        op = block_column_op(n, 0.03, seed)
        rep = compute_mrip_constants(op, s)
        assert rep.passed
        rho, beta = rip_to_nsp_constants(rep.constants["delta_s"], rep.constants["Delta_s"], s)
        assert rho < 1
        rng = np.random.default_rng(seed)
        for _ in range(3):
            X = gen_sparse_flat_signal(n, s, seed=rng)
            E = rng.standard_normal(n * n)
            E *= eta / np.linalg.norm(E)
            res = solve_constrained(op, op.apply(X) + E, eta)
            err = norm_colmax_l1(res.minimizer - X)
            assert err <= 2 * (1 + rho) / (1 - rho) * beta * eta + 1e-8
