"""Monte-Carlo conic width estimators and closed-form measurement bounds.

All absolute constants that the bounds leave unspecified are parameters
defaulting to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError
from .norms import descent_cone_sup, dist_to_subgradient_cone, norm_colmax_l1
from .operators import DISTRIBUTIONS, MeasurementOp, sample_entries
from .signal_model import as_signal

__all__ = [
    "WidthEstimate",
    "MeasurementBound",
    "mc_width_sq",
    "mc_width_kronecker",
    "q_xi_estimate",
    "estimate_lambda_min",
    "analytic_width_bound",
    "required_measurements",
    "necessary_measurements",
]


@dataclass
class WidthEstimate:
    """A Monte-Carlo statistic.

    For ``gaussian_width_sq`` and ``kronecker_width`` ``mean`` is the sample
    mean. For ``q_xi`` and ``lambda_min`` it is the sampled extreme (minimum)
    and ``std_error`` refers to the per-sample values behind it.
    """

    mean: float
    std_error: float
    samples: int
    kind: str
    values: np.ndarray = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)


def _summary(vals, kind, **extra) -> WidthEstimate:
    vals = np.asarray(vals, dtype=float)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size))
    return WidthEstimate(float(vals.mean()), se, int(vals.size), kind, vals, dict(extra))


def _check_samples(samples):
    if samples < 2:
        raise ParameterError("need at least 2 samples")


def _nonzero_signal(X):
    X = as_signal(X)
    if not np.any(X):
        raise ParameterError("X = 0: the descent cone is the whole space")
    return X


def mc_width_sq(X, samples: int = 1000, seed=None) -> WidthEstimate:
    """Mean of ``inf_{t >= 0, V in subdiff} |G - t V|_F^2`` over standard Gaussian ``G``.

    The expectation upper-bounds the squared Gaussian width of the descent cone.
    """
    X = _nonzero_signal(X)
    _check_samples(samples)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    vals = [dist_to_subgradient_cone(rng.standard_normal((n, n)), X).dist_sq
            for _ in range(samples)]
    return _summary(vals, "gaussian_width_sq")


def mc_width_kronecker(X, m: int, dist: str = "gaussian", samples: int = 500,
                       seed=None) -> WidthEstimate:
    """Mean over ``H = A^T E B / m`` of the descent-cone supremum of ``<H, U>``.

    ``A, B`` are ``m x n`` with i.i.d. ``dist`` entries and ``E`` is an
    ``m x m`` Rademacher matrix. ``extra["mean_frobenius"]`` is the mean of
    ``|H|_F`` on the same draws.
    """
    X = _nonzero_signal(X)
    _check_samples(samples)
    if m < 1:
        raise ParameterError("m must be >= 1")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    vals, fro = [], []
    for _ in range(samples):
        A = sample_entries(dist, (m, n), rng)
        B = sample_entries(dist, (m, n), rng)
        E = sample_entries("rademacher", (m, m), rng)
        H = A.T @ E @ B / m
        vals.append(descent_cone_sup(H, X))
        fro.append(np.linalg.norm(H))
    fro = np.asarray(fro)
    return _summary(vals, "kronecker_width", mean_frobenius=float(fro.mean()),
                    frobenius_values=fro)


def q_xi_estimate(dist: str, n: int, directions: int = 20, samples: int = 10000, seed=None,
                  xi: float = 1.0 / math.sqrt(2.0)) -> WidthEstimate:
    """Minimum over random unit directions ``U`` of ``P[|a^T U b| >= xi]``.

    ``a, b`` have i.i.d. ``dist`` entries, so ``a^T U b = <a b^T, U>``.
    ``extra`` records the second moment of ``<a b^T, U>`` at the minimizing
    direction with its standard error.
    """
    if directions < 1:
        raise ParameterError("directions must be >= 1")
    _check_samples(samples)
    if dist not in DISTRIBUTIONS:
        raise ParameterError(f"unknown distribution {dist!r}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(directions):
        U = rng.standard_normal((n, n))
        U /= np.linalg.norm(U)
        a = sample_entries(dist, (samples, n), rng)
        b = sample_entries(dist, (samples, n), rng)
        proj = np.einsum("ki,ij,kj->k", a, U, b)
        hits = (np.abs(proj) >= xi).astype(float)
        p = float(hits.mean())
        if best is None or p < best[0]:
            best = (p, hits, proj)
    p, hits, proj = best
    sq = proj * proj
    return WidthEstimate(p, float(hits.std(ddof=1) / math.sqrt(samples)), samples, "q_xi", hits,
                         {"second_moment": float(sq.mean()),
                          "second_moment_se": float(sq.std(ddof=1) / math.sqrt(samples)),
                          "directions": directions, "xi": xi})


def _in_descent_cone(X, U, eps=(1e-3, 1e-4, 1e-5, 1e-6, 1e-7), tol=1e-8) -> bool:
    f0 = norm_colmax_l1(X)
    return any(norm_colmax_l1(X + e * U) <= f0 + tol * e for e in eps)


def estimate_lambda_min(op: MeasurementOp, X, samples: int = 1000, seed=None,
                        retries: int = 100) -> WidthEstimate:
    """Smallest ``|Phi(U)|_2`` over sampled unit directions ``U`` of the descent cone.

    Directions come from Gaussian ``G`` minus its projection onto the polar
    cone (Moreau), normalized. Every 100th direction is audited for
    ``||X + eps U||_1 <= ||X||_1`` at some small ``eps``.
    """
    X = _nonzero_signal(X)
    _check_samples(samples)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    vals = []
    audit_fail = 0
    rejected = 0
    while len(vals) < samples:
        G = rng.standard_normal((n, n))
        res = dist_to_subgradient_cone(G, X)
        U = G - res.projection
        nrm = np.linalg.norm(U)
        if nrm <= 1e-12 * max(1.0, np.linalg.norm(G)):
            rejected += 1
            if rejected > retries:
                raise ParameterError("descent cone sampling failed: cone looks degenerate")
            continue
        U /= nrm
        if len(vals) % 100 == 0 and not _in_descent_cone(X, U):
            audit_fail += 1
        vals.append(float(np.linalg.norm(op.apply(U))))
    vals = np.asarray(vals)
    return WidthEstimate(float(vals.min()), float(vals.std(ddof=1) / math.sqrt(vals.size)),
                         int(vals.size), "lambda_min", vals,
                         {"audit_failures": audit_fail, "rejected": rejected})


def _log_arg(x: float, what: str) -> float:
    if not x > 1.0:
        raise DomainError(f"log argument {what} = {x} must exceed 1")
    return math.log(x)


def analytic_width_bound(n: int, s: int, r: int, C: float = 1.0, family: str = "gaussian",
                         sigma_a: float = 1.0, sigma_b: float = 1.0) -> float:
    """Closed-form upper bounds on the squared widths.

    gaussian             ``1 + n^2 - r (n - s log(C n^4 r^2))``
    kronecker_gaussian   ``1 + n^2 - r (n - s log^2(C n^2 r))``
    kronecker_subgaussian  the Kronecker value times ``sigma_a^2 sigma_b^2``
    """
    if C <= 0:
        raise ParameterError("C must be positive")
    if not (1 <= s <= n and 1 <= r <= n):
        raise ParameterError(f"need 1 <= s, r <= n, got n={n}, s={s}, r={r}")
    if family == "gaussian":
        L = _log_arg(C * n**4 * r**2, "C n^4 r^2")
        return 1.0 + n * n - r * (n - s * L)
    if family in ("kronecker_gaussian", "kronecker_subgaussian"):
        L = _log_arg(C * n * n * r, "C n^2 r")
        val = 1.0 + n * n - r * (n - s * L * L)
        if family == "kronecker_subgaussian":
            val *= sigma_a**2 * sigma_b**2
        return val
    raise ParameterError(f"unknown family {family!r}")


@dataclass(frozen=True)
class MeasurementBound:
    """``m`` as in the bound; for Kronecker families ``m`` is the side and ``total = m^2``."""

    m: float
    total: float
    family: str
    side: bool


def required_measurements(family: str, n: int, s: int, eta: float = 0.0, delta: float = 1.0,
                          t: float = 0.0, constants: dict | None = None) -> MeasurementBound:
    """Sufficient measurement counts for robust recovery.

    gaussian               ``(t + 2 eta/delta + sqrt(n s log(C n^6)))^2``
    subgaussian            ``(C1 rho^4/alpha)(a t + 2 eta/delta + sigma C2 sqrt(rho^6 n s log(C3 n^6)))^2``
    kronecker_gaussian     ``t + 4 sqrt(2) eta/delta + C1 sqrt(n s) log(C2 n^3)``
    kronecker_subgaussian  as above with ``C1`` multiplied by ``sigma_a sigma_b``

    ``alpha``, ``rho`` and ``sigma`` have no defaults for the sub-Gaussian
    family; every other constant defaults to 1.
    """
    c = dict(constants or {})
    if delta <= 0:
        raise ParameterError("delta must be positive")
    if eta < 0 or t < 0:
        raise ParameterError("eta and t must be nonnegative")
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= n, got s={s}, n={n}")
    for k, v in c.items():
        if not v > 0:
            raise ParameterError(f"constant {k} must be positive")
    noise = 2.0 * eta / delta
    if family == "gaussian":
        L = _log_arg(c.get("C", 1.0) * n**6, "C n^6")
        m = (t + noise + math.sqrt(n * s * L)) ** 2
        return MeasurementBound(m, m, family, False)
    if family == "subgaussian":
        missing = [k for k in ("alpha", "rho", "sigma") if k not in c]
        if missing:
            raise ParameterError(f"sub-Gaussian bound needs constants {missing}")
        alpha, rho, sigma = c["alpha"], c["rho"], c["sigma"]
        L = _log_arg(c.get("C3", 1.0) * n**6, "C3 n^6")
        inner = c.get("a", 1.0) * t + noise + sigma * c.get("C2", 1.0) * math.sqrt(rho**6 * n * s * L)
        m = c.get("C1", 1.0) * rho**4 / alpha * inner**2
        return MeasurementBound(m, m, family, False)
    if family in ("kronecker_gaussian", "kronecker_subgaussian"):
        L = _log_arg(c.get("C2", 1.0) * n**3, "C2 n^3")
        scale = c.get("C1", 1.0)
        if family == "kronecker_subgaussian":
            scale *= c.get("sigma_a", 1.0) * c.get("sigma_b", 1.0)
        m = t + 4.0 * math.sqrt(2.0) * eta / delta + scale * math.sqrt(n * s) * L
        return MeasurementBound(m, m * m, family, True)
    raise ParameterError(f"unknown family {family!r}")


def necessary_measurements(n: int, s: int) -> float:
    """Lower bound ``n s log(n/(4 s)) / (2 log 3)`` on the measurement count.

    Returns 0 on the boundary ``n = 4 s``; below it the logarithm is negative
    and a :class:`DomainError` is raised.
    """
    if s < 1 or n < 1:
        raise ParameterError("need n, s >= 1")
    arg = n / (4.0 * s)
    if arg < 1.0:
        raise DomainError(f"log argument n/(4s) = {arg} is below 1")
    return n * s * math.log(arg) / (2.0 * math.log(3.0))
