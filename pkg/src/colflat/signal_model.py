"""Column-wise sparse, l1-column-flat matrix signals and their sparsity patterns.

Signals are plain ``(n, n)`` float arrays. Row indices inside a
:class:`SparsityPattern` are 0-based.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ParameterError

__all__ = [
    "SparsityPattern",
    "as_signal",
    "column_l1",
    "gen_sparse_flat_signal",
    "sigma_s_tail",
    "flatness_defect",
    "support_pattern",
    "restrict_to_pattern",
]


def as_signal(X, name: str = "X") -> np.ndarray:
    """Validate ``X`` as a finite square real matrix and return it as float64."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] == 0:
        raise ParameterError(f"{name} must be a non-empty square matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ParameterError(f"{name} has non-finite entries")
    return X


def column_l1(X) -> np.ndarray:
    """Per-column l1 norms."""
    return np.abs(np.asarray(X, dtype=float)).sum(axis=0)


@dataclass(frozen=True)
class SparsityPattern:
    """Per-column supports ``S_j`` of an ``n x n`` matrix, each of size at most ``s``."""

    supports: tuple
    s: int

    def __post_init__(self):
        n = len(self.supports)
        cleaned = []
        for j, Sj in enumerate(self.supports):
            Sj = tuple(sorted(int(i) for i in Sj))
            if len(set(Sj)) != len(Sj):
                raise ParameterError(f"duplicate row index in column {j}")
            if Sj and (Sj[0] < 0 or Sj[-1] >= n):
                raise ParameterError(f"row index out of range in column {j}")
            if len(Sj) > self.s:
                raise ParameterError(f"column {j} has {len(Sj)} > s={self.s} entries")
            cleaned.append(Sj)
        object.__setattr__(self, "supports", tuple(cleaned))

    @property
    def n(self) -> int:
        return len(self.supports)

    @property
    def size(self) -> int:
        return sum(len(Sj) for Sj in self.supports)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for j, Sj in enumerate(self.supports):
            m[list(Sj), j] = True
        return m

    def flat_indices(self) -> np.ndarray:
        """Row-major positions ``i * n + j`` of the pattern entries, sorted."""
        return np.flatnonzero(self.mask().ravel())

    def complement(self) -> "SparsityPattern":
        full = range(self.n)
        sup = tuple(tuple(i for i in full if i not in set(Sj)) for Sj in self.supports)
        return SparsityPattern(sup, max((len(c) for c in sup), default=0))

    @classmethod
    def from_mask(cls, mask, s: int | None = None) -> "SparsityPattern":
        mask = np.asarray(mask, dtype=bool)
        sup = tuple(tuple(np.flatnonzero(mask[:, j])) for j in range(mask.shape[1]))
        if s is None:
            s = max((len(c) for c in sup), default=0)
        return cls(sup, s)

    @classmethod
    def full(cls, n: int) -> "SparsityPattern":
        return cls(tuple(tuple(range(n)) for _ in range(n)), n)

    @classmethod
    def empty(cls, n: int) -> "SparsityPattern":
        return cls(tuple(() for _ in range(n)), 0)

    @classmethod
    def diagonal(cls, n: int) -> "SparsityPattern":
        return cls(tuple((j,) for j in range(n)), 1)

    @classmethod
    def enumerate(cls, n: int, s: int) -> Iterator["SparsityPattern"]:
        """All patterns with exactly ``min(s, n)`` entries in every column."""
        k = min(s, n)
        column_choices = list(itertools.combinations(range(n), k))
        for combo in itertools.product(column_choices, repeat=n):
            yield cls(combo, s)

    @staticmethod
    def count(n: int, s: int) -> int:
        from math import comb

        return comb(n, min(s, n)) ** n


def gen_sparse_flat_signal(n: int, s: int, r: int | None = None, seed=None,
                           min_gap: float = 0.2) -> np.ndarray:
    """Draw a column-wise ``s``-sparse signal with exactly ``r`` maximal columns.

    Every column gets ``s`` nonzeros at uniformly drawn rows with magnitudes
    ``|N(0,1)| + 0.1`` and random signs. ``r`` uniformly chosen columns are
    rescaled to unit l1 norm; the others to an l1 norm drawn uniformly from
    ``[(1 - min_gap)/2, 1 - min_gap]``. ``r = None`` means ``r = n`` (flat).
    """
    if r is None:
        r = n
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ParameterError(f"n must be a positive integer, got {n!r}")
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= n, got s={s}, n={n}")
    if not 1 <= r <= n:
        raise ParameterError(f"need 1 <= r <= n, got r={r}, n={n}")
    if not 0.0 < min_gap < 1.0:
        raise ParameterError(f"min_gap must lie in (0, 1), got {min_gap}")
    rng = np.random.default_rng(seed)
    X = np.zeros((n, n))
    for j in range(n):
        rows = rng.choice(n, size=s, replace=False)
        mags = np.abs(rng.standard_normal(s)) + 0.1
        signs = rng.choice([-1.0, 1.0], size=s)
        X[rows, j] = signs * mags / mags.sum()
    flat_cols = rng.choice(n, size=r, replace=False)
    scale = rng.uniform(0.5 * (1.0 - min_gap), 1.0 - min_gap, size=n)
    scale[flat_cols] = 1.0
    return X * scale[None, :]


def sigma_s_tail(v, s: int) -> float:
    """l1 norm of ``v`` minus the sum of its ``s`` largest magnitudes."""
    a = np.abs(np.asarray(v, dtype=float).ravel())
    if not 0 <= s <= a.size:
        raise ParameterError(f"need 0 <= s <= len(v), got s={s}")
    if s == 0:
        return float(a.sum())
    a = np.sort(a)
    return float(a[: a.size - s].sum())


def flatness_defect(X) -> float:
    """``max_j |x_j|_1 - min_j |x_j|_1``; zero exactly for l1-column-flat ``X``."""
    c = column_l1(X)
    return float(c.max() - c.min()) if c.size else 0.0


def support_pattern(X, tol: float = 1e-9) -> SparsityPattern:
    if tol < 0:
        raise ParameterError("tol must be nonnegative")
    X = as_signal(X)
    return SparsityPattern.from_mask(np.abs(X) > tol)


def _pattern_mask(S, n: int) -> np.ndarray:
    if isinstance(S, SparsityPattern):
        if S.n != n:
            raise ParameterError(f"pattern is for n={S.n}, signal has n={n}")
        return S.mask()
    mask = np.asarray(S, dtype=bool)
    if mask.shape != (n, n):
        raise ParameterError(f"mask shape {mask.shape} does not match ({n}, {n})")
    return mask


def restrict_to_pattern(X, S, complement: bool = False) -> np.ndarray:
    """``X_S`` (entries outside ``S`` zeroed) or, with ``complement``, ``X_{-S}``."""
    X = as_signal(X)
    mask = _pattern_mask(S, X.shape[0])
    if complement:
        mask = ~mask
    return np.where(mask, X, 0.0)

