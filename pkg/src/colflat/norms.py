"""The max-column-l1 norm, its dual, subdifferential, prox and cone kernels.

``||X||_1 = max_j |x_j|_1`` with dual ``||M||_1^* = sum_j |m_j|_inf``.

The cone kernels work on the polar of the descent cone at ``X``, which is
the cone ``{t V : t >= 0, V in subdiff ||X||_1}``. Writing ``c_j = t lambda_j``
turns the squared distance to that cone into independent one-dimensional
piecewise quadratics, one per maximal column, minimized exactly by a sort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ParameterError
from .signal_model import as_signal, column_l1

__all__ = [
    "MAXIMAL_RTOL",
    "SubgradientElement",
    "ConeDistanceResult",
    "norm_colmax_l1",
    "dual_norm",
    "maximal_columns",
    "subdiff_contains",
    "subdiff_element",
    "project_dual_ball",
    "prox_colmax_l1",
    "dist_to_subgradient_cone",
    "project_polar_cone",
    "dist_to_subdifferential",
    "descent_cone_sup",
]

# relative tolerance for "column attains the maximum l1 norm"
MAXIMAL_RTOL = 1e-9


def norm_colmax_l1(X) -> float:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return 0.0
    return float(np.abs(X).sum(axis=0).max())


def dual_norm(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.abs(M).max(axis=0).sum())


def maximal_columns(X, rtol: float = MAXIMAL_RTOL) -> np.ndarray:
    """Boolean mask of columns whose l1 norm is within ``rtol`` (relative) of the max."""
    c = column_l1(X)
    top = c.max()
    if top == 0.0:
        return np.ones_like(c, dtype=bool)
    return c >= top * (1.0 - rtol)


def subdiff_contains(X, M, tol: float = 1e-10) -> bool:
    """Membership test ``M in subdiff ||X||_1`` via ``||M||^* <= 1`` and ``<M, X> >= ||X||_1``."""
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    if X.shape != M.shape:
        raise ParameterError(f"shape mismatch {X.shape} vs {M.shape}")
    return bool(dual_norm(M) <= 1.0 + tol and np.vdot(M, X) >= norm_colmax_l1(X) - tol)


@dataclass(frozen=True)
class SubgradientElement:
    """Weights ``lam`` (simplex, on maximal columns) and columns ``xi`` in ``[-1, 1]^n``."""

    lam: np.ndarray
    xi: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.xi * self.lam[None, :]


def subdiff_element(X, lam, xi_off_support=0.0, rtol: float = MAXIMAL_RTOL) -> SubgradientElement:
    """Build a subgradient with ``xi_j = sgn(x_j)`` on the support and given values elsewhere.

    Parameters
    ----------
    X : (n, n) array
    lam : (n,) array
        Nonnegative weights summing to one, zero off the maximal columns.
    xi_off_support : scalar or (n, n) array
        Values used at positions where ``X`` is zero. Entries at support
        positions are ignored.
    """
    X = as_signal(X)
    n = X.shape[0]
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.shape != (n,):
        raise ParameterError(f"lambda must have length {n}")
    if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-12:
        raise ParameterError("lambda must be nonnegative and sum to 1")
    if np.any(lam[~maximal_columns(X, rtol)] != 0):
        raise ParameterError("lambda puts weight on a non-maximal column")
    off = np.broadcast_to(np.asarray(xi_off_support, dtype=float), X.shape)
    on = X != 0
    if np.any(np.abs(off[~on]) > 1.0):
        raise ParameterError("off-support values must lie in [-1, 1]")
    xi = np.where(on, np.sign(X), off)
    return SubgradientElement(lam.copy(), xi)


def project_dual_ball(M, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{||.||_1^* <= radius}`` (the l1,inf ball).

    Column ``j`` of the projection is ``M_j`` clipped to ``[-mu_j, mu_j]``
    where ``sum_i (|M_ij| - mu_j)_+ = theta`` for a common multiplier
    ``theta``, chosen so that ``sum_j mu_j = radius``. Each ``mu_j(theta)`` is
    piecewise linear with breakpoints read off the sorted column, so
    ``theta`` is bracketed by evaluating all merged breakpoints at once
    (bisection for very large inputs) and solved in closed form on the bracket.
    """
    if radius <= 0:
        raise ParameterError("radius must be positive")
    M = np.asarray(M, dtype=float)
    A = np.abs(M)
    if A.size == 0 or A.max(axis=0).sum() <= radius:
        return M.copy()
    n = A.shape[0]
    V = -np.sort(-A, axis=0)
    C = np.cumsum(V, axis=0)
    k = np.arange(1, n + 1)[:, None]
    # theta at which the k-th largest entry enters the clipped set
    Cprev = np.vstack([np.zeros((1, A.shape[1])), C[:-1]])
    bk = Cprev - (k - 1) * V
    bk = np.vstack([bk, C[-1:]])  # mu_j vanishes beyond the column l1 norm
    bk = np.maximum.accumulate(bk, axis=0)  # guard round-off monotonicity

    cols = np.arange(A.shape[1])
    # shift column j's breakpoints by j * span so one searchsorted serves all columns
    span = 2.0 * bk[n].max() + 1.0
    off = cols * span
    flat = (bk[:n] + off[None, :]).T.ravel()

    def mu(theta):
        # theta: (K,) -> (K, ncols)
        cnt = np.searchsorted(flat, theta[:, None] + off[None, :], side="right") - cols * n
        cnt = np.clip(cnt, 1, n)  # bk[0] = 0 <= theta
        Ck = C[cnt - 1, cols[None, :]]
        out = (Ck - theta[:, None]) / cnt
        out[theta[:, None] >= bk[n][None, :]] = 0.0
        return np.maximum(out, 0.0)

    # g is piecewise linear and nonincreasing between merged breakpoints
    pts = np.unique(bk.ravel())
    if pts.size <= 100_000:
        gp = mu(pts).sum(axis=1)
        hi = int(np.argmax(gp <= radius))  # gp[0] > radius >= gp[-1] = 0
        lo = hi - 1
        g0, g1 = gp[lo], gp[hi]
    else:
        lo, hi = 0, len(pts) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if mu(pts[mid:mid + 1]).sum() > radius:
                lo = mid
            else:
                hi = mid
        g0, g1 = mu(pts[[lo, hi]]).sum(axis=1)
    t0, t1 = pts[lo], pts[hi]
    theta = t0 + (g0 - radius) * (t1 - t0) / (g0 - g1) if g0 > g1 else t1
    mus = mu(np.array([theta]))[0]
    return np.sign(M) * np.minimum(A, mus[None, :])


def prox_colmax_l1(X, tau: float) -> np.ndarray:
    """Prox of ``tau ||.||_1`` via Moreau: ``X - P_{||.||^* <= tau}(X)``."""
    if tau < 0:
        raise ParameterError("tau must be nonnegative")
    X = np.asarray(X, dtype=float)
    if tau == 0:
        return X.copy()
    return X - project_dual_ball(X, tau)


# --------------------------------------------------------------------------
# cone kernels

def _column_scalars(G, X, active, shift: float = 0.0) -> np.ndarray:
    """Per-column minimizers ``c_j >= 0`` of ``d_j(c) + shift * c``.

    ``d_j(c) = sum_{S_j} (G_ij - c sgn X_ij)^2 + sum_{off S_j} dist(G_ij, [-c, c])^2``.
    Columns outside ``active`` get ``c_j = 0``.
    """
    n = X.shape[0]
    on = X != 0
    k_on = on.sum(axis=0)
    a = (np.sign(X) * G * on).sum(axis=0) - 0.5 * shift
    U = np.where(on, 0.0, np.abs(G))
    u = -np.sort(-U, axis=0)
    Cs = np.vstack([np.zeros((1, n)), np.cumsum(u, axis=0)])  # Cs[k] = top-k sum
    k = np.arange(1, n + 1)[:, None]
    # half-derivative of d_j at c = u_k (entries 1..k-1 active)
    D = (k_on + k - 1) * u - a - Cs[:-1]
    below = D <= 0
    k0 = np.where(below.any(axis=0), below.argmax(axis=0) + 1, n + 1)
    denom = k_on + k0 - 1
    num = a + Cs[k0 - 1, np.arange(n)]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(denom > 0, num / np.where(denom > 0, denom, 1), 0.0)
    c = np.maximum(c, 0.0)
    c[~active] = 0.0
    return c


def _polar_point(G, X, c) -> np.ndarray:
    on = X != 0
    return np.where(on, c[None, :] * np.sign(X), np.clip(G, -c[None, :], c[None, :]))


@dataclass(frozen=True)
class ConeDistanceResult:
    """Squared distance from ``G`` to the polar cone ``{t V}`` and its minimizer.

    ``sup_value`` is the norm of the polar-cone component of ``G``, so
    ``dist_sq + sup_value**2 = |G|_F**2`` (Moreau).
    """

    dist_sq: float
    t_star: float
    v_star: SubgradientElement
    sup_value: float
    projection: np.ndarray


def dist_to_subgradient_cone(G, X, rtol: float = MAXIMAL_RTOL) -> ConeDistanceResult:
    """Exact ``inf {|G - t V|_F^2 : t >= 0, V in subdiff ||X||_1}``."""
    X = as_signal(X)
    G = np.asarray(G, dtype=float)
    if G.shape != X.shape:
        raise ParameterError(f"shape mismatch {G.shape} vs {X.shape}")
    if not np.any(X):
        raise ParameterError("X = 0: the descent cone is the whole space")
    act = maximal_columns(X, rtol)
    c = _column_scalars(G, X, act)
    P = _polar_point(G, X, c)
    dist_sq = float(np.sum((G - P) ** 2))
    t = float(c.sum())
    if t > 0:
        lam = c / t
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(c[None, :] > 0, P / np.where(c > 0, c, 1.0)[None, :], 0.0)
    else:
        lam = act / act.sum()
        off = np.zeros_like(X)
    on = X != 0
    xi = np.where(on, np.sign(X), np.clip(off, -1.0, 1.0))
    v = SubgradientElement(lam, xi)
    sup = float(np.linalg.norm(P))
    return ConeDistanceResult(dist_sq, t, v, sup, P)


def project_polar_cone(G, X, rtol: float = MAXIMAL_RTOL) -> np.ndarray:
    """Euclidean projection of ``G`` onto the cone generated by ``subdiff ||X||_1``."""
    return dist_to_subgradient_cone(G, X, rtol).projection


def dist_to_subdifferential(G, X, rtol: float = MAXIMAL_RTOL):
    """Frobenius distance from ``G`` to ``subdiff ||X||_1`` and the nearest point.

    For ``X = 0`` the subdifferential is the dual unit ball.
    """
    X = np.asarray(X, dtype=float)
    G = np.asarray(G, dtype=float)
    if not np.any(X):
        P = project_dual_ball(G, 1.0)
        return float(np.linalg.norm(G - P)), P
    act = maximal_columns(X, rtol)

    # shift nu prices sum_j c_j; find nu with sum c_j(nu) = 1
    def excess(nu):
        return _column_scalars(G, X, act, nu).sum() - 1.0

    if abs(excess(0.0)) <= 1e-15:
        nu = 0.0
    else:
        lo, hi = -1.0, 1.0
        while excess(lo) < 0:
            lo *= 2.0
        while excess(hi) > 0:
            hi *= 2.0
        nu = brentq(excess, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    c = _column_scalars(G, X, act, nu)
    s = c.sum()
    if s > 0:
        c = c / s
    P = _polar_point(G, X, c)
    return float(np.linalg.norm(G - P)), P


def descent_cone_sup(H, X, rtol: float = MAXIMAL_RTOL) -> float:
    """``sup {<H, U> : U in descent cone of ||.||_1 at X, |U|_F = 1}``.

    By Moreau the descent cone component of ``H`` is ``H - P`` with ``P`` the
    polar-cone projection, so the supremum is ``|H - P|_F``.
    """
    return float(np.sqrt(dist_to_subgradient_cone(H, X, rtol).dist_sq))
