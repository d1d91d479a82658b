"""Linear measurement operators on ``n x n`` matrices.

Three kinds are provided: a dense ``m x n^2`` matrix acting on the row-major
vectorization, the Kronecker map ``Z -> A Z B^T`` and sums of such maps.
:class:`RestrictedOp` masks the input (and the adjoint output) to a
sparsity pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ParameterError, SingularityError
from .signal_model import SparsityPattern, _pattern_mask

__all__ = [
    "DISTRIBUTIONS",
    "sample_entries",
    "MeasurementOp",
    "DenseOp",
    "SumKroneckerOp",
    "RestrictedOp",
    "GramInfo",
    "make_dense",
    "make_identity",
    "make_kronecker",
    "make_sum_kronecker",
    "make_random_kronecker",
    "apply",
    "adjoint",
    "restrict_op",
    "scale_op",
    "normal_matrix",
    "pseudo_inverse_matrix",
    "pseudo_inverse_apply",
    "KRONECKER_MATERIALIZE_MAX_N",
]

# psi2-type scale recorded for each unit-variance entry law
DISTRIBUTIONS = {"gaussian": 1.0, "rademacher": 1.0, "uniform": 1.0}

KRONECKER_MATERIALIZE_MAX_N = 8
GRAM_RTOL = 1e-10


def sample_entries(dist: str, size, rng) -> np.ndarray:
    """I.i.d. unit-variance, zero-mean entries."""
    if dist == "gaussian":
        return rng.standard_normal(size)
    if dist == "rademacher":
        return 2.0 * rng.integers(0, 2, size=size) - 1.0
    if dist == "uniform":
        r = np.sqrt(3.0)
        return rng.uniform(-r, r, size=size)
    raise ParameterError(f"unknown distribution {dist!r}; expected one of {sorted(DISTRIBUTIONS)}")


class MeasurementOp:
    """Base class. Subclasses define ``apply``, ``adjoint`` and ``columns``."""

    kind = "abstract"
    n: int
    out_shape: tuple
    dist: str | None = None
    sigma: float | None = None

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    def _check_in(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.shape != (self.n, self.n):
            raise ParameterError(f"expected ({self.n}, {self.n}) input, got {Z.shape}")
        return Z

    def _check_out(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != self.out_shape:
            if w.size == self.out_size:
                return w.reshape(self.out_shape)
            raise ParameterError(f"expected measurement of shape {self.out_shape}, got {w.shape}")
        return w

    def apply(self, Z) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, w) -> np.ndarray:
        raise NotImplementedError

    def columns(self, idx) -> np.ndarray:
        """Images of the basis matrices ``E_{i,j}`` at flat positions ``idx`` as columns."""
        idx = np.asarray(idx, dtype=int)
        out = np.empty((self.out_size, idx.size))
        E = np.zeros(self.n * self.n)
        for c, p in enumerate(idx):
            E[p] = 1.0
            out[:, c] = self.apply(E.reshape(self.n, self.n)).ravel()
            E[p] = 0.0
        return out

    def matrix(self) -> np.ndarray:
        """Dense ``out_size x n^2`` representation."""
        return self.columns(np.arange(self.n * self.n))

    def pinv_apply(self, w) -> np.ndarray:
        """Minimum-norm least-squares preimage ``Phi^+ w`` as an ``n x n`` matrix."""
        raise NotImplementedError


class DenseOp(MeasurementOp):
    kind = "dense"

    def __init__(self, P, dist: str | None = None, sigma: float | None = None):
        P = np.asarray(P, dtype=float)
        if P.ndim != 2:
            raise ParameterError("dense payload must be 2-D")
        n = int(round(np.sqrt(P.shape[1])))
        if n * n != P.shape[1] or n == 0:
            raise ParameterError(f"payload width {P.shape[1]} is not a square number")
        if not np.all(np.isfinite(P)):
            raise ParameterError("payload has non-finite entries")
        self.P = P
        self.n = n
        self.out_shape = (P.shape[0],)
        self.dist = dist
        self.sigma = sigma
        self._svd = None

    @property
    def m(self) -> int:
        return self.P.shape[0]

    def apply(self, Z):
        return self.P @ self._check_in(Z).ravel()

    def adjoint(self, w):
        return (self.P.T @ self._check_out(w)).reshape(self.n, self.n)

    def columns(self, idx):
        return self.P[:, np.asarray(idx, dtype=int)]

    def matrix(self):
        return self.P.copy()

    def pinv_apply(self, w):
        if self._svd is None:
            U, s, Vt = np.linalg.svd(self.P, full_matrices=False)
            keep = s > s.max() * max(self.P.shape) * np.finfo(float).eps if s.size else s > 0
            self._svd = (U[:, keep], s[keep], Vt[keep])
        U, s, Vt = self._svd
        return (Vt.T @ ((U.T @ self._check_out(w)) / s)).reshape(self.n, self.n)


class SumKroneckerOp(MeasurementOp):
    """``Z -> sum_mu A_mu Z B_mu^T`` with ``m x n`` factors; kind ``kronecker`` when L = 1."""

    def __init__(self, factors, dist: str | None = None, sigma=None):
        factors = [(np.asarray(A, dtype=float), np.asarray(B, dtype=float)) for A, B in factors]
        if not factors:
            raise ParameterError("need at least one (A, B) factor pair")
        m, n = factors[0][0].shape
        for A, B in factors:
            if A.ndim != 2 or A.shape != (m, n) or B.shape != (m, n):
                raise ParameterError("all factors must share one m x n shape")
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
                raise ParameterError("factor has non-finite entries")
        if n == 0 or m == 0:
            raise ParameterError("empty factor")
        self.factors = factors
        self.n = n
        self.m = m
        self.out_shape = (m, m)
        self.kind = "kronecker" if len(factors) == 1 else "sum_kronecker"
        self.dist = dist
        # sigma is (sigma_A, sigma_B) for random factors
        self.sigma = sigma
        self._pinv = None

    @property
    def A(self):
        return self.factors[0][0]

    @property
    def B(self):
        return self.factors[0][1]

    def apply(self, Z):
        Z = self._check_in(Z)
        return sum(A @ Z @ B.T for A, B in self.factors)

    def adjoint(self, w):
        Y = self._check_out(w)
        return sum(A.T @ Y @ B for A, B in self.factors)

    def columns(self, idx):
        idx = np.asarray(idx, dtype=int)
        i, j = np.divmod(idx, self.n)
        out = np.zeros((self.m * self.m, idx.size))
        for A, B in self.factors:
            # image of E_ij is the outer product A[:, i] B[:, j]^T
            out += (A[:, i][:, None, :] * B[:, j][None, :, :]).reshape(self.m * self.m, -1)
        return out

    def matrix(self):
        if self.n > KRONECKER_MATERIALIZE_MAX_N:
            raise ParameterError(
                f"refusing to materialize a Kronecker operator with n={self.n} > "
                f"{KRONECKER_MATERIALIZE_MAX_N}")
        return sum(np.kron(A, B) for A, B in self.factors)

    def pinv_apply(self, w):
        Y = self._check_out(w)
        if len(self.factors) == 1:
            if self._pinv is None:
                self._pinv = (np.linalg.pinv(self.A), np.linalg.pinv(self.B))
            Ap, Bp = self._pinv
            return Ap @ Y @ Bp.T
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.matrix())
        return (self._pinv @ Y.ravel()).reshape(self.n, self.n)


class RestrictedOp(MeasurementOp):
    """``Phi_S(Z) = Phi(Z_S)``; the adjoint is masked to ``S`` as well."""

    kind = "restricted"

    def __init__(self, base: MeasurementOp, pattern):
        if isinstance(base, RestrictedOp):
            mask = base.mask & _pattern_mask(pattern, base.n)
            base = base.base
        else:
            mask = _pattern_mask(pattern, base.n)
        self.base = base
        self.mask = mask
        self.pattern = SparsityPattern.from_mask(mask)
        self.n = base.n
        self.out_shape = base.out_shape
        self.dist = base.dist
        self.sigma = base.sigma

    def apply(self, Z):
        return self.base.apply(np.where(self.mask, self._check_in(Z), 0.0))

    def adjoint(self, w):
        return np.where(self.mask, self.base.adjoint(w), 0.0)

    def columns(self, idx):
        idx = np.asarray(idx, dtype=int)
        out = self.base.columns(idx)
        out[:, ~self.mask.ravel()[idx]] = 0.0
        return out


def make_dense(m: int, n: int, dist: str = "gaussian", seed=None) -> DenseOp:
    if m < 1 or n < 1:
        raise ParameterError(f"need m, n >= 1, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    P = sample_entries(dist, (m, n * n), rng)
    return DenseOp(P, dist=dist, sigma=DISTRIBUTIONS[dist])


def make_identity(n: int) -> DenseOp:
    """The vectorization map (``m = n^2``)."""
    return DenseOp(np.eye(n * n))


def make_kronecker(A, B) -> SumKroneckerOp:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape != B.shape:
        raise ParameterError(f"A and B must both be m x n, got {A.shape} and {B.shape}")
    return SumKroneckerOp([(A, B)])


def make_sum_kronecker(factors) -> SumKroneckerOp:
    return SumKroneckerOp(list(factors))


def make_random_kronecker(m: int, n: int, dist: str = "gaussian", seed=None) -> SumKroneckerOp:
    if m < 1 or n < 1:
        raise ParameterError(f"need m, n >= 1, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    A = sample_entries(dist, (m, n), rng)
    B = sample_entries(dist, (m, n), rng)
    s = DISTRIBUTIONS[dist]
    return SumKroneckerOp([(A, B)], dist=dist, sigma=(s, s))


def apply(op: MeasurementOp, Z) -> np.ndarray:
    return op.apply(Z)


def adjoint(op: MeasurementOp, w) -> np.ndarray:
    return op.adjoint(w)


def restrict_op(op: MeasurementOp, S) -> RestrictedOp:
    return RestrictedOp(op, S)


def scale_op(op: MeasurementOp, c: float) -> MeasurementOp:
    """``c * Phi`` with the same kind."""
    if isinstance(op, DenseOp):
        return DenseOp(c * op.P, op.dist, op.sigma)
    if isinstance(op, SumKroneckerOp):
        return SumKroneckerOp([(c * A, B) for A, B in op.factors], op.dist, op.sigma)
    if isinstance(op, RestrictedOp):
        return RestrictedOp(scale_op(op.base, c), op.mask)
    raise ParameterError(f"cannot scale {type(op).__name__}")


@dataclass(frozen=True)
class GramInfo:
    """Gram matrix of ``Phi`` on the pattern coordinates (row-major order)."""

    gram: np.ndarray
    indices: np.ndarray
    smallest_eigenvalue: float
    largest_eigenvalue: float
    bijective: bool
    PhiS: np.ndarray


def normal_matrix(op: MeasurementOp, S, rtol: float = GRAM_RTOL) -> GramInfo:
    """``Phi_S^T Phi_S`` restricted to the coordinates of ``S``."""
    if isinstance(op, RestrictedOp):
        mask = op.mask & _pattern_mask(S, op.n)
    else:
        mask = _pattern_mask(S, op.n)
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        raise ParameterError("pattern is empty")
    PhiS = op.columns(idx)
    G = PhiS.T @ PhiS
    G = 0.5 * (G + G.T)
    ev = np.linalg.eigvalsh(G)
    lo, hi = float(ev[0]), float(ev[-1])
    return GramInfo(G, idx, lo, hi, bool(hi > 0 and lo > rtol * hi), PhiS)


def pseudo_inverse_matrix(op: MeasurementOp, S, info: GramInfo | None = None) -> tuple:
    """Matrix of ``(Phi_S^T Phi_S)^{-1} Phi_S^T`` (``|S| x out_size``) and the flat indices."""
    info = info or normal_matrix(op, S)
    if not info.bijective:
        raise SingularityError(
            f"Gram matrix on S is singular (smallest eigenvalue {info.smallest_eigenvalue:.3e})",
            info.smallest_eigenvalue)
    cf = linalg.cho_factor(info.gram)
    return linalg.cho_solve(cf, info.PhiS.T), info.indices


def pseudo_inverse_apply(op: MeasurementOp, S, y, info: GramInfo | None = None) -> np.ndarray:
    """``Y* in Sigma(S)`` solving the normal equations ``Phi_S^T (Phi_S(Y*) - y) = 0``."""
    info = info or normal_matrix(op, S)
    if not info.bijective:
        raise SingularityError(
            f"Gram matrix on S is singular (smallest eigenvalue {info.smallest_eigenvalue:.3e})",
            info.smallest_eigenvalue)
    y = np.asarray(y, dtype=float).ravel()
    if y.size != op.out_size:
        raise ParameterError(f"measurement has {y.size} entries, operator produces {op.out_size}")
    cf = linalg.cho_factor(info.gram)
    coef = linalg.cho_solve(cf, info.PhiS.T @ y)
    out = np.zeros(op.n * op.n)
    out[info.indices] = coef
    return out.reshape(op.n, op.n)
