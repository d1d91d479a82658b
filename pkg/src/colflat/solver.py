"""Solvers for the penalized and constrained max-column-l1 programs.

Penalized::

    min_Z ||Z||_1 + (gamma / 2) |y - Phi(Z)|_2^2

Constrained::

    min_Z ||Z||_1  s.t.  |y - Phi(Z)|_2 <= eta

The penalized problem is solved by FISTA with restart-on-increase. The
constrained problem is solved by a search over ``gamma`` (``eta > 0``). With
``eta = 0`` it is a linear program, solved by HiGHS by default or by
Douglas-Rachford splitting on the affine constraint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import brentq, linprog

from .errors import NoConvergenceError, ParameterError
from .norms import dist_to_subdifferential, dual_norm, norm_colmax_l1, prox_colmax_l1
from .operators import MeasurementOp

__all__ = [
    "SolverConfig",
    "SolveResult",
    "operator_norm_sq",
    "solve_penalized",
    "solve_constrained",
    "kkt_residual",
    "oracle_solve_small",
    "scalar_penalized_solution",
]

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    """Iteration limits and tolerances.

    ``tol_kkt`` bounds the distance from ``gamma Phi^T(y - Phi Z)`` to the
    subdifferential at ``Z``; ``tol_feas`` is relative to ``max(1, |y|)``.
    """

    max_iters: int = 20000
    tol_kkt: float = 1e-9
    tol_feas: float = 1e-8
    power_iters: int = 20
    power_tol: float = 1e-6
    restart: bool = True
    gamma_bracket: tuple = (1e-4, 1e6)
    bracket_expansions: int = 40
    search_iters: int = 100
    dr_max_iters: int = 50000
    dr_tol_gap: float = 1e-10
    equality_method: str = "lp"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.dr_max_iters < 1:
            raise ParameterError("iteration limits must be >= 1")
        if self.equality_method not in ("lp", "dr"):
            raise ParameterError("equality_method must be 'lp' or 'dr'")
        if min(self.tol_kkt, self.tol_feas, self.power_tol, self.dr_tol_gap) <= 0:
            raise ParameterError("tolerances must be positive")


@dataclass
class SolveResult:
    """Minimizer plus diagnostics.

    ``kkt_residual`` is the distance from ``gamma Phi^T(y - Phi Z)`` to the
    subdifferential for penalized solves (and for ``eta > 0``, at the final
    ``gamma``); for ``eta = 0`` it is a certified duality gap.
    ``feasibility_gap`` is relative to ``max(1, |y|)``.
    """

    minimizer: np.ndarray
    objective: float
    kkt_residual: float
    feasibility_gap: float
    gamma: float
    iterations: int
    converged: bool
    status: str = "ok"
    residual_norm: float = float("nan")
    history: list = field(default_factory=list, repr=False)

    def as_record(self) -> dict:
        return {
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "feasibility_gap": self.feasibility_gap,
            "gamma": self.gamma,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "residual_norm": self.residual_norm,
            "minimizer": self.minimizer.tolist(),
        }


def _check_y(op: MeasurementOp, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.size != op.out_size:
        raise ParameterError(f"y has {y.size} entries, operator produces {op.out_size}")
    if not np.all(np.isfinite(y)):
        raise ParameterError("y has non-finite entries")
    return y.reshape(op.out_shape)


def operator_norm_sq(op: MeasurementOp, iters: int = 20, tol: float = 1e-6, seed=0) -> float:
    """Power-iteration estimate of ``||Phi^T Phi||`` (a lower estimate; callers backtrack)."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((op.n, op.n))
    Z /= np.linalg.norm(Z)
    lam = 0.0
    for _ in range(iters):
        W = op.adjoint(op.apply(Z))
        new = float(np.linalg.norm(W))
        if new == 0.0:
            return 0.0
        Z = W / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return lam


def kkt_residual(op: MeasurementOp, y, gamma: float, Z) -> float:
    """Distance from ``gamma Phi^T(y - Phi Z)`` to the subdifferential of ``||.||_1`` at ``Z``.

    At ``Z = 0`` this is ``max(0, ||G||^* - 1)``.
    """
    if gamma <= 0:
        raise ParameterError("gamma must be positive")
    y = _check_y(op, y)
    Z = np.asarray(Z, dtype=float)
    G = gamma * op.adjoint(y - op.apply(Z))
    if not np.any(Z):
        return max(0.0, dual_norm(G) - 1.0)
    return dist_to_subdifferential(G, Z)[0]


def _objective(op, y, gamma, Z, r=None):
    if r is None:
        r = y - op.apply(Z)
    return norm_colmax_l1(Z) + 0.5 * gamma * float(np.sum(r * r))


def solve_penalized(op: MeasurementOp, y, gamma: float, cfg: SolverConfig | None = None,
                    Z0=None) -> SolveResult:
    """FISTA with backtracking and restart on objective increase."""
    cfg = cfg or SolverConfig()
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ParameterError(f"gamma must be positive and finite, got {gamma}")
    y = _check_y(op, y)
    n = op.n
    L = operator_norm_sq(op, cfg.power_iters, cfg.power_tol, cfg.seed)
    if L == 0.0 or not np.any(y):
        Z = np.zeros((n, n))
        return SolveResult(Z, _objective(op, y, gamma, Z), kkt_residual(op, y, gamma, Z), 0.0,
                           gamma, 0, True, residual_norm=float(np.linalg.norm(y)),
                           history=[_objective(op, y, gamma, Z)])
    Lf = gamma * L * 1.01

    x = np.zeros((n, n)) if Z0 is None else np.array(Z0, dtype=float)
    rx = y - op.apply(x)
    Fx = _objective(op, y, gamma, x, rx)
    hist = [Fx]
    v, rv, t = x.copy(), rx.copy(), 1.0
    bound = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gv = -gamma * op.adjoint(rv)
        while True:
            step = 1.0 / Lf
            z = prox_colmax_l1(v - step * gv, step)
            rz = y - op.apply(z)
            fz = 0.5 * gamma * float(np.sum(rz * rz))
            d = z - v
            # f is quadratic, so the descent-lemma gap is exactly gamma |Phi d|^2 / 2
            dr = rv - rz
            if gamma * float(np.vdot(dr, dr)) <= Lf * float(np.vdot(d, d)) * (1.0 + 1e-12):
                break
            Lf *= 2.0
        Fz = fz + norm_colmax_l1(z)
        if cfg.restart and Fz > Fx + 1e-13 * max(1.0, abs(Fx)) and not np.array_equal(v, x):
            # reject the extrapolated step and restart momentum from x; a plain
            # step from x always decreases F up to round-off, so it is accepted
            v, rv, t = x.copy(), rx.copy(), 1.0
            continue
        # w = (v - z)/step - grad(v) lies in the subdifferential at z
        gz = -gamma * op.adjoint(rz)
        bound = float(np.linalg.norm(-d / step - gz + gv))
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = z + ((t - 1.0) / t_new) * (z - x)
        rv = rz + ((t - 1.0) / t_new) * (rz - rx)
        x, rx, Fx, t = z, rz, Fz, t_new
        hist.append(Fx)
        if bound <= cfg.tol_kkt:
            break
    # bound is the distance of one explicit subgradient, hence also a valid upper bound
    kkt = min(kkt_residual(op, y, gamma, x), bound)
    conv = kkt <= cfg.tol_kkt
    return SolveResult(x, Fx, kkt, 0.0, gamma, it, conv,
                       status="ok" if conv else "max_iters",
                       residual_norm=float(np.linalg.norm(rx)), history=hist)


def _solve_equality_lp(op: MeasurementOp, y, cfg: SolverConfig) -> SolveResult:
    """``min t`` over ``(z, u, t)`` with ``Phi z = y``, ``|z| <= u`` and column sums of ``u`` at most ``t``.

    ``kkt_residual`` holds the duality gap certified by the equality duals
    ``nu`` (rescaled into the dual unit ball), as in the splitting variant.
    """
    n = op.n
    N = n * n
    yv = np.ravel(y)
    Phi = op.columns(np.arange(N))
    m = Phi.shape[0]
    I = sparse.identity(N, format="csr")
    colsum = sparse.csr_matrix((np.ones(N), (np.arange(N) % n, np.arange(N))), shape=(n, N))
    A_ub = sparse.vstack([
        sparse.hstack([I, -I, sparse.csr_matrix((N, 1))]),
        sparse.hstack([-I, -I, sparse.csr_matrix((N, 1))]),
        sparse.hstack([sparse.csr_matrix((n, N)), colsum, -np.ones((n, 1))]),
    ], format="csr")
    A_eq = sparse.hstack([sparse.csr_matrix(Phi), sparse.csr_matrix((m, N + 1))], format="csr")
    c = np.zeros(2 * N + 1)
    c[-1] = 1.0
    bounds = [(None, None)] * N + [(0, None)] * (N + 1)
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * N + n), A_eq=A_eq, b_eq=yv, bounds=bounds,
                  method="highs", options={"primal_feasibility_tolerance": 1e-10,
                                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 2:
        # y outside the range of Phi
        raise NoConvergenceError("equality constraint is infeasible", {"message": res.message})
    if not res.success:
        raise NoConvergenceError(f"LP solver failed: {res.message}", {"status": res.status})
    Z = res.x[:N].reshape(n, n).copy()
    # vertex solutions carry round-off entries that would fake support for the certificate
    Z[np.abs(Z) <= 1e-11 * max(np.abs(Z).max(), 1e-300)] = 0.0
    nu = res.eqlin.marginals
    V = (Phi.T @ nu).reshape(n, n)
    # weak duality: <y, nu> / max(1, ||Phi^T nu||^*) lower-bounds the optimum
    primal = norm_colmax_l1(Z)
    gap = max(0.0, primal - float(yv @ nu) / max(1.0, dual_norm(V)))
    r = float(np.linalg.norm(np.ravel(op.apply(Z)) - yv))
    feas = r / max(1.0, float(np.linalg.norm(yv)))
    conv = gap <= min(cfg.tol_kkt, cfg.dr_tol_gap * max(1.0, primal)) and feas <= cfg.tol_feas
    return SolveResult(Z, primal, gap, feas, math.inf, int(res.nit), conv,
                       status="ok" if conv else "lp_inaccurate", residual_norm=r)


def _solve_equality(op: MeasurementOp, y, cfg: SolverConfig) -> SolveResult:
    if cfg.equality_method == "lp":
        return _solve_equality_lp(op, y, cfg)
    return _solve_equality_dr(op, y, cfg)


def _solve_equality_dr(op: MeasurementOp, y, cfg: SolverConfig) -> SolveResult:
    """Douglas-Rachford on ``min ||Z||_1 + indicator{Phi Z = y}``.

    The affine projection is ``Z - Phi^+(Phi Z - y)``. The scaled difference
    ``V = (x - w)/t`` lies in the range of ``Phi^T``, so ``<x, V> / max(1, ||V||^*)``
    is a dual objective value and gives a certified duality gap.
    """
    def proj(Z):
        return Z - op.pinv_apply(op.apply(Z) - y)

    x = proj(np.zeros((op.n, op.n)))
    scale = norm_colmax_l1(x)
    if scale == 0.0:
        return SolveResult(x, 0.0, 0.0, float(np.linalg.norm(y)), math.inf, 0, True,
                           residual_norm=float(np.linalg.norm(y)))
    # step: the subgradients have dual norm 1, so match t to the signal scale per column
    t = scale / op.n
    w = x.copy()
    gap = np.inf
    it = 0
    for it in range(1, cfg.dr_max_iters + 1):
        x = proj(w)
        z = prox_colmax_l1(2.0 * x - w, t)
        w = w + z - x
        if it % 10 == 0 or it == cfg.dr_max_iters:
            x = proj(w)
            V = (x - w) / t
            primal = norm_colmax_l1(x)
            dual = float(np.vdot(x, V)) / max(1.0, dual_norm(V))
            gap = primal - dual
            if gap <= cfg.dr_tol_gap * max(1.0, primal):
                break
    res = float(np.linalg.norm(op.apply(x) - y))
    feas = res / max(1.0, float(np.linalg.norm(y)))
    conv = gap <= min(cfg.tol_kkt, cfg.dr_tol_gap * max(1.0, norm_colmax_l1(x))) and feas <= cfg.tol_feas
    return SolveResult(x, norm_colmax_l1(x), gap, feas, math.inf, it, conv,
                       status="ok" if conv else "max_iters", residual_norm=res)


def solve_constrained(op: MeasurementOp, y, eta: float, cfg: SolverConfig | None = None) -> SolveResult:
    """Minimize ``||Z||_1`` subject to ``|y - Phi(Z)|_2 <= eta``.

    ``eta >= |y|`` returns zero with status ``"trivial"``. ``eta = 0`` solves
    the linear program (``cfg.equality_method``; ``gamma`` is reported as ``inf``). Otherwise
    ``gamma`` is searched in log scale so that the penalized residual
    ``r(gamma)`` equals ``eta``.
    """
    cfg = cfg or SolverConfig()
    y = _check_y(op, y)
    if eta < 0 or not math.isfinite(eta):
        raise ParameterError(f"eta must be finite and nonnegative, got {eta}")
    ynorm = float(np.linalg.norm(y))
    if eta >= ynorm:
        log.warning("eta >= |y|: zero is feasible and optimal")
        Z = np.zeros((op.n, op.n))
        return SolveResult(Z, 0.0, 0.0, 0.0, 0.0, 0, True, status="trivial", residual_norm=ynorm)
    if eta == 0.0:
        return _solve_equality(op, y, cfg)

    ftol = cfg.tol_feas * max(1.0, ynorm)
    cache = {}

    def run(lg):
        if lg not in cache:
            near = min(cache, key=lambda k: abs(k - lg)) if cache else None
            Z0 = cache[near].minimizer if near is not None else None
            cache[lg] = solve_penalized(op, y, math.exp(lg), cfg, Z0=Z0)
        return cache[lg]

    # below 1/||Phi^T y||^* the penalized minimizer is 0 and r = |y| > eta
    g0 = 1.0 / max(dual_norm(op.adjoint(y)), 1e-300)
    lo = math.log(g0)
    hi = lo + math.log(10.0)
    for _ in range(cfg.bracket_expansions):
        if run(hi).residual_norm <= eta:
            break
        lo = hi
        hi += math.log(10.0)
    else:
        r = run(hi)
        raise NoConvergenceError(
            "could not bracket gamma: residual stays above eta",
            {"gamma_hi": math.exp(hi), "residual": r.residual_norm, "eta": eta})

    def phi(lg):
        return run(lg).residual_norm - eta

    if abs(phi(hi)) <= ftol:
        lg = hi
    else:
        lg = brentq(phi, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=cfg.search_iters)
    best = min(cache, key=lambda k: abs(cache[k].residual_norm - eta))
    res = cache[best]
    gap = abs(res.residual_norm - eta)
    conv = res.converged and gap <= ftol
    return SolveResult(res.minimizer, norm_colmax_l1(res.minimizer), res.kkt_residual,
                       gap / max(1.0, ynorm), math.exp(best), sum(r.iterations for r in cache.values()),
                       conv, status="ok" if conv else "feasibility", residual_norm=res.residual_norm)


def scalar_penalized_solution(phi: float, y: float, gamma: float) -> float:
    """Closed form for ``n = 1, m = 1``: minimize ``|z| + gamma/2 (y - phi z)^2``."""
    a = phi * y
    return math.copysign(max(0.0, abs(a) - 1.0 / gamma), a) / (phi * phi)


def oracle_solve_small(op: MeasurementOp, y, mode: str, value: float) -> SolveResult:
    """Reference solution from a conic interior-point solver (cvxpy + CLARABEL).

    ``mode`` is ``"penalized"`` (``value = gamma``) or ``"constrained"``
    (``value = eta``). Guarded to ``n <= 2`` and at most 4 rows in the
    measurement.
    """
    import cvxpy as cp

    if op.n > 2 or op.out_shape[0] > 4:
        raise ParameterError("oracle_solve_small is limited to n <= 2 and m <= 4")
    y = _check_y(op, y)
    P = op.matrix()
    yv = y.ravel()
    n = op.n
    z = cp.Variable(n * n)
    Z = cp.reshape(z, (n, n), order="C")
    reg = cp.max(cp.sum(cp.abs(Z), axis=0))
    if mode == "penalized":
        prob = cp.Problem(cp.Minimize(reg + 0.5 * value * cp.sum_squares(yv - P @ z)))
    elif mode == "constrained":
        cons = [P @ z == yv] if value == 0 else [cp.norm(yv - P @ z, 2) <= value]
        prob = cp.Problem(cp.Minimize(reg), cons)
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10,
               max_iter=500)
    if z.value is None:
        raise NoConvergenceError(f"oracle failed with status {prob.status}")
    Zs = np.asarray(z.value, dtype=float).reshape(n, n)
    r = yv - P @ Zs.ravel()
    gamma = value if mode == "penalized" else math.nan
    kkt = kkt_residual(op, y, gamma, Zs) if mode == "penalized" else math.nan
    obj = norm_colmax_l1(Zs) + (0.5 * value * float(r @ r) if mode == "penalized" else 0.0)
    return SolveResult(Zs, obj, kkt, 0.0, gamma, 0,
                       prob.status == "optimal", status=prob.status,
                       residual_norm=float(np.linalg.norm(r)))
