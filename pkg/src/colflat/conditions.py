"""Desk-scale certificates for the recovery conditions.

Null space ratios, robust null space fits, M-RIP constants, ERC operator
norms, the per-column flatness condition and the support/sign stability
report. Searches over kernel directions are lower-bound estimates carrying
their witnesses; the operator norms are exact when the relevant extreme
point enumeration is small enough.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from .errors import ConditionViolatedError, ParameterError, SingularityError
from .norms import dual_norm
from .operators import MeasurementOp, normal_matrix, pseudo_inverse_matrix
from .signal_model import SparsityPattern, _pattern_mask

__all__ = [
    "ConditionReport",
    "OpNormResult",
    "NORM_TAGS",
    "matrix_norm",
    "nsp_ratio",
    "estimate_nsp_ratio",
    "estimate_robust_nsp",
    "compute_mrip_constants",
    "rip_to_nsp_constants",
    "check_flatness_condition",
    "opnorm_exotic",
    "check_erc",
    "thm41_report",
    "EXACT_MAX_N",
    "EXACT_MAX_S",
    "EXACT_ENUM_LIMIT",
]

EXACT_MAX_N = 4
EXACT_MAX_S = 2
EXACT_ENUM_LIMIT = 10**6

# norm tags on n x n matrices: max-column l1, its dual (sum of column maxima),
# entrywise max, entrywise sum and Frobenius; "l2" is Frobenius on vectors
NORM_TAGS = ("l1", "dual", "max", "sum", "fro", "l2")
DUAL_TAG = {"l1": "dual", "dual": "l1", "max": "sum", "sum": "max", "fro": "fro", "l2": "l2"}


@dataclass
class ConditionReport:
    """Named constants of one condition plus the flag derived from them."""

    name: str
    constants: dict
    passed: bool
    method: str
    samples: int = 0
    notes: list = field(default_factory=list)
    witness: dict = field(default_factory=dict, repr=False)

    def as_record(self) -> dict:
        rec = {"name": self.name, "pass": self.passed, "method": self.method,
               "samples": self.samples}
        rec.update({k: v for k, v in self.constants.items()})
        if self.notes:
            rec["notes"] = "; ".join(self.notes)
        return rec


def _exact_scale(n: int, s: int) -> bool:
    return n <= EXACT_MAX_N and s <= EXACT_MAX_S


# --------------------------------------------------------------------------
# norms on flattened batches

def _batch_norm(V, tag: str, shape) -> np.ndarray:
    """Norm ``tag`` of each row of ``V`` interpreted with ``shape``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    A = np.abs(V)
    if tag in ("fro", "l2"):
        return np.sqrt((V * V).sum(axis=1))
    if tag == "max":
        return A.max(axis=1) if A.shape[1] else np.zeros(len(A))
    if tag == "sum":
        return A.sum(axis=1)
    if len(shape) != 2:
        raise ParameterError(f"norm {tag!r} needs a matrix shape, got {shape}")
    A = A.reshape(len(A), *shape)
    if tag == "l1":
        return A.sum(axis=1).max(axis=1)
    if tag == "dual":
        return A.max(axis=1).sum(axis=1)
    raise ParameterError(f"unknown norm tag {tag!r}")


def matrix_norm(Z, tag: str) -> float:
    Z = np.asarray(Z, dtype=float)
    shape = Z.shape if Z.ndim == 2 else (Z.size,)
    return float(_batch_norm(Z.ravel()[None, :], tag, shape)[0])


def _lmo(G, tag: str, shape) -> np.ndarray:
    """Maximizer of ``<G, Z>`` over the unit ball of ``tag`` (flat output)."""
    g = np.asarray(G, dtype=float).ravel()
    Z = np.zeros_like(g)
    if tag in ("fro", "l2"):
        nrm = np.linalg.norm(g)
        return g / nrm if nrm > 0 else Z
    if tag == "max":
        return np.sign(g)
    if tag == "sum":
        p = int(np.argmax(np.abs(g)))
        Z[p] = np.sign(g[p])
        return Z
    Gm = g.reshape(shape)
    Zm = Z.reshape(shape)
    if tag == "l1":
        rows = np.argmax(np.abs(Gm), axis=0)
        cols = np.arange(shape[1])
        Zm[rows, cols] = np.sign(Gm[rows, cols])
        return Zm.ravel()
    if tag == "dual":
        j = int(np.argmax(np.abs(Gm).sum(axis=0)))
        Zm[:, j] = np.sign(Gm[:, j])
        return Zm.ravel()
    raise ParameterError(f"unknown norm tag {tag!r}")


# --------------------------------------------------------------------------
# operator norms

@dataclass(frozen=True)
class OpNormResult:
    value: float
    method: str
    witness: np.ndarray
    enumerated: int = 0


def _vertex_count(tag: str, shape, active) -> int:
    if tag in ("fro", "l2"):
        return 0
    a = active.reshape(shape) if len(shape) == 2 else active
    if tag == "sum":
        return int(2 * a.sum())
    if tag == "max":
        return 2 ** int(a.sum())
    if tag == "l1":
        return int(np.prod([max(1, 2 * int(c)) for c in a.sum(axis=0)], dtype=object))
    if tag == "dual":
        return int(sum(2 ** int(c) for c in a.sum(axis=0) if c))
    raise ParameterError(f"unknown norm tag {tag!r}")


def _sign_vectors(k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0))
    return np.array(list(itertools.product((1.0, -1.0), repeat=k)))


def _enumerate_max(T, src: str, tgt: str, in_shape, out_shape, active):
    """Exact ``max beta(T e)`` over the vertices ``e`` of the ``src`` unit ball."""
    q = T.shape[1]
    best, wit = -1.0, np.zeros(q)

    def consider(images, coeffs_fn):
        nonlocal best, wit
        if len(images) == 0:
            return
        vals = _batch_norm(images, tgt, out_shape)
        k = int(np.argmax(vals))
        if vals[k] > best:
            best = float(vals[k])
            wit = coeffs_fn(k)

    idx_all = np.flatnonzero(active)
    if src == "sum":
        def coef(k):
            e = np.zeros(q)
            e[idx_all[k]] = 1.0
            return e
        consider(T[:, idx_all].T, coef)
    elif src == "max":
        S = _sign_vectors(idx_all.size)
        for lo in range(0, len(S), 65536):
            blk = S[lo:lo + 65536]

            def coef(k, blk=blk):
                e = np.zeros(q)
                e[idx_all] = blk[k]
                return e
            consider(blk @ T[:, idx_all].T, coef)
    elif src == "dual":
        a = active.reshape(in_shape)
        for j in range(in_shape[1]):
            rows = np.flatnonzero(a[:, j])
            if rows.size == 0:
                continue
            flat = rows * in_shape[1] + j
            S = _sign_vectors(rows.size)

            def coef(k, S=S, flat=flat):
                e = np.zeros(q)
                e[flat] = S[k]
                return e
            consider(S @ T[:, flat].T, coef)
    elif src == "l1":
        a = active.reshape(in_shape)
        # per column: the signed active unit vectors (or 0 if the column is inactive)
        opts = []
        for j in range(in_shape[1]):
            flat = np.flatnonzero(a[:, j]) * in_shape[1] + j
            if flat.size == 0:
                continue
            opts.append((np.concatenate([flat, flat]),
                         np.concatenate([np.ones(flat.size), -np.ones(flat.size)])))
        if not opts:
            return 0.0, np.zeros(q)
        # fix the sign of the first column's choice (symmetry e -> -e)
        f0, s0 = opts[0]
        half = len(f0) // 2
        opts[0] = (f0[:half], s0[:half])
        # split into an enumerated tail block and a python loop over the head
        tail, size = [], 1
        for o in reversed(opts):
            if size * len(o[0]) > 50000 and tail:
                break
            tail.insert(0, o)
            size *= len(o[0])
        head = opts[: len(opts) - len(tail)]
        # images of all tail combinations
        imgs = np.zeros((1, T.shape[0]))
        for f, sg in tail:
            col = (T[:, f] * sg).T
            imgs = (imgs[:, None, :] + col[None, :, :]).reshape(-1, T.shape[0])
        tail_choices = list(itertools.product(*[range(len(o[0])) for o in tail]))
        for hc in itertools.product(*[range(len(o[0])) for o in head]):
            base = np.zeros(T.shape[0])
            for (f, sg), c in zip(head, hc):
                base = base + T[:, f[c]] * sg[c]

            def coef(k, hc=hc):
                e = np.zeros(q)
                for (f, sg), c in zip(head, hc):
                    e[f[c]] = sg[c]
                for (f, sg), c in zip(tail, tail_choices[k]):
                    e[f[c]] = sg[c]
                return e
            consider(imgs + base[None, :], coef)
    else:
        raise ParameterError(f"cannot enumerate the {src!r} ball")
    return max(best, 0.0), wit


def _power_method(T, src, tgt, in_shape, out_shape, starts, iters, rng):
    best, wit = 0.0, np.zeros(T.shape[1])
    dual_tgt = DUAL_TAG[tgt]
    for _ in range(starts):
        u = rng.standard_normal(T.shape[0])
        last = -1.0
        for _ in range(iters):
            Z = _lmo(T.T @ u, src, in_shape)
            img = T @ Z
            val = float(_batch_norm(img[None, :], tgt, out_shape)[0])
            if val > best:
                best, wit = val, Z
            if val <= last + 1e-15:
                break
            last = val
            u = _lmo(img, dual_tgt, out_shape)
    return best, wit


def opnorm_exotic(T, src: str, tgt: str, mode: str = "auto", in_shape=None, out_shape=None,
                  starts: int = 200, iters: int = 50, seed=0, details: bool = False):
    """Operator norm ``N(T: ||.||_src -> ||.||_tgt)`` of a linear map given as a matrix.

    Parameters
    ----------
    T : (p, q) array
        Matrix acting on row-major flattened inputs.
    src, tgt : str
        Norm tags from :data:`NORM_TAGS`.
    mode : {"auto", "exact", "sampled"}
        ``exact`` maximizes the target norm over the vertices of the source
        unit ball (only positions where ``T`` has a nonzero column are
        enumerated; limit ``EXACT_ENUM_LIMIT``). A Euclidean source is
        handled through the transpose. ``sampled`` runs a multi-start
        alternating power method and returns a lower bound.
    in_shape, out_shape : tuple, optional
        Default to square matrix shapes, or vectors for ``l2``.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    for tag in (src, tgt):
        if tag not in NORM_TAGS:
            raise ParameterError(f"unsupported norm tag {tag!r}; expected one of {NORM_TAGS}")
    if mode not in ("auto", "exact", "sampled"):
        raise ParameterError(f"unknown mode {mode!r}")

    def default_shape(size, tag):
        if tag == "l2":
            return (size,)
        r = int(round(math.sqrt(size)))
        if r * r != size:
            if tag in ("l1", "dual"):
                raise ParameterError(f"dimension {size} is not a square matrix space")
            return (size,)
        return (r, r)

    in_shape = tuple(in_shape) if in_shape is not None else default_shape(T.shape[1], src)
    out_shape = tuple(out_shape) if out_shape is not None else default_shape(T.shape[0], tgt)
    if int(np.prod(in_shape)) != T.shape[1] or int(np.prod(out_shape)) != T.shape[0]:
        raise ParameterError("shapes do not match the matrix")

    if src in ("fro", "l2"):
        if tgt in ("fro", "l2"):
            s = np.linalg.svd(T, compute_uv=False)
            val = float(s[0]) if s.size else 0.0
            if details:
                _, _, Vt = np.linalg.svd(T)
                return OpNormResult(val, "exact", Vt[0] if val > 0 else np.zeros(T.shape[1]))
            return val
        # N(T: l2 -> b) = N(T^T: b* -> l2)
        res = opnorm_exotic(T.T, DUAL_TAG[tgt], "l2", mode, out_shape, (T.shape[1],),
                            starts, iters, seed, details=True)
        if details:
            u = res.witness
            img = T.T @ u
            nrm = np.linalg.norm(img)
            return OpNormResult(res.value, res.method, img / nrm if nrm > 0 else img,
                                res.enumerated)
        return res.value

    active = np.abs(T).max(axis=0) > 0 if T.size else np.zeros(T.shape[1], dtype=bool)
    count = _vertex_count(src, in_shape, active)
    if mode == "exact" and count > EXACT_ENUM_LIMIT:
        raise ParameterError(f"exact enumeration needs {count} vertices > {EXACT_ENUM_LIMIT}")
    if mode == "exact" or (mode == "auto" and count <= EXACT_ENUM_LIMIT):
        val, wit = _enumerate_max(T, src, tgt, in_shape, out_shape, active)
        res = OpNormResult(val, "exact", wit, count)
    else:
        rng = np.random.default_rng(seed)
        val, wit = _power_method(T, src, tgt, in_shape, out_shape, starts, iters, rng)
        res = OpNormResult(val, "sampled-lower-bound", wit)
    return res if details else res.value


# --------------------------------------------------------------------------
# null space property

def nsp_ratio(H, S=None, s: int | None = None) -> float:
    """``||H_S||_1 / ||H_{-S}||_1``; with ``S = None`` the worst pattern of size ``s``.

    The worst pattern keeps the ``s`` largest magnitudes of every column,
    which simultaneously maximizes the numerator and minimizes the
    denominator.
    """
    H = np.asarray(H, dtype=float)
    A = np.abs(H)
    if S is None:
        if s is None:
            raise ParameterError("give a pattern S or a sparsity s")
        srt = -np.sort(-A, axis=0)
        num = srt[:s].sum(axis=0).max()
        den = srt[s:].sum(axis=0).max() if s < H.shape[0] else 0.0
    else:
        mask = _pattern_mask(S, H.shape[0])
        num = np.where(mask, A, 0.0).sum(axis=0).max()
        den = np.where(mask, 0.0, A).sum(axis=0).max()
    if den == 0.0:
        return math.inf if num > 0 else 0.0
    return float(num / den)


def _top_s_mask(H, s):
    n = H.shape[0]
    order = np.argsort(-np.abs(H), axis=0, kind="stable")
    mask = np.zeros(H.shape, dtype=bool)
    mask[order[: min(s, n)], np.arange(n)[None, :]] = True
    return mask


def _nsp_lp(K, mask, obj_pos, obj_sign, n, bound=1e6):
    """Maximize ``sum obj_sign * H[obj_pos]`` over ``H = K c`` with ``max_j |h_{-S_j}|_1 <= 1``."""
    k = K.shape[1]
    off = np.flatnonzero(~mask.ravel())
    n_off = off.size
    # variables [c (k), t (n_off)]
    cobj = np.zeros(k + n_off)
    cobj[:k] = -(obj_sign @ K[obj_pos])
    Ko = K[off]
    I = np.eye(n_off)
    A_abs = np.vstack([np.hstack([Ko, -I]), np.hstack([-Ko, -I])])
    col_of = off % n
    A_col = np.zeros((n, k + n_off))
    A_col[col_of, k + np.arange(n_off)] = 1.0
    A_ub = np.vstack([A_abs, A_col])
    b_ub = np.concatenate([np.zeros(2 * n_off), np.ones(n)])
    bounds = [(-bound, bound)] * k + [(0, None)] * n_off
    res = linprog(cobj, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return K @ res.x[:k]


def _nonuniform_ratio(K, X, lam):
    """``sup |sum_j lam_j <h_{S_j}, sgn x_j>| / ||H_{-S}||_1`` over the kernel (two LPs)."""
    n = X.shape[0]
    mask = X != 0
    pos = np.flatnonzero(mask.ravel())
    w = (np.sign(X) * np.asarray(lam, dtype=float)[None, :]).ravel()[pos]
    best, wit = 0.0, None
    for sg in (1.0, -1.0):
        H = _nsp_lp(K, mask, pos, sg * w, n)
        if H is None:
            continue
        Hm = H.reshape(n, n)
        num = abs(float(w @ H[pos]))
        den = float(np.where(mask, 0.0, np.abs(Hm)).sum(axis=0).max())
        val = math.inf if den == 0 and num > 0 else (num / den if den > 0 else 0.0)
        if val > best:
            best, wit = val, Hm
    return best, wit


def estimate_nsp_ratio(op: MeasurementOp, s: int, trials: int = 50, refine_steps: int = 10,
                       seed=0, X=None, lam=None) -> ConditionReport:
    """Largest ``||H_S||_1 / ||H_{-S}||_1`` over kernel directions ``H`` and ``s``-patterns ``S``.

    For fixed ``S``, column ``j*`` and sign vector ``sigma`` on ``S_{j*}`` the
    maximum is a linear program in the kernel coordinates. With ``n <= 4`` and
    ``s <= 2`` every pattern, column and sign is enumerated, which gives the
    exact value (method ``exact-enumeration``). Otherwise random kernel
    directions are refined by repeated LPs on their own worst pattern
    (``sampled-lower-bound``). ``X`` and ``lam`` add the non-uniform
    diagnostic for that signal.
    """
    n = op.n
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= n, got s={s}")
    K = linalg.null_space(op.matrix())
    exact = _exact_scale(n, s)
    method = "exact-enumeration" if exact else "sampled-lower-bound"
    rep = ConditionReport("nsp", {"rho": 0.0, "kernel_dim": int(K.shape[1])}, True, method)
    if X is not None:
        Xa = np.asarray(X, dtype=float)
        lam = np.full(n, 1.0 / n) if lam is None else np.asarray(lam, dtype=float)
        if K.shape[1]:
            nu, Hnu = _nonuniform_ratio(K, Xa, lam)
        else:
            nu, Hnu = 0.0, None
        rep.constants["nonuniform_ratio"] = nu
        rep.constants["nonuniform_pass"] = bool(nu < 1.0)
        rep.witness["nonuniform_H"] = Hnu
    if K.shape[1] == 0:
        rep.notes.append("kernel is trivial")
        return rep

    best, best_H = -1.0, None

    def consider(H):
        nonlocal best, best_H
        if H is None or not np.any(np.abs(H) > 1e-14):
            return
        Hm = H.reshape(n, n)
        r = nsp_ratio(Hm, s=s)
        if r > best:
            best, best_H = r, Hm

    count = 0
    if exact:
        k = min(s, n)
        signs = _sign_vectors(k)
        signs = signs[signs[:, 0] > 0]  # H -> -H symmetry
        for P in SparsityPattern.enumerate(n, s):
            mask = P.mask()
            for j in range(n):
                pos = np.array(P.supports[j]) * n + j
                for sg in signs:
                    consider(_nsp_lp(K, mask, pos, sg, n))
                    count += 1
    else:
        rng = np.random.default_rng(seed)
        starts = [K[:, i] for i in range(K.shape[1])]
        starts += [K @ rng.standard_normal(K.shape[1]) for _ in range(trials)]
        for H in starts:
            Hm = H.reshape(n, n)
            consider(H)
            for _ in range(refine_steps):
                mask = _top_s_mask(Hm, s)
                A = np.abs(Hm)
                j = int(np.argmax(np.where(mask, A, 0).sum(axis=0)))
                pos = np.flatnonzero(mask[:, j]) * n + j
                sg = np.sign(Hm.ravel()[pos])
                sg[sg == 0] = 1.0
                Hn = _nsp_lp(K, mask, pos, sg, n)
                count += 1
                if Hn is None:
                    break
                old = nsp_ratio(Hm, s=s)
                consider(Hn)
                Hm = Hn.reshape(n, n)
                if nsp_ratio(Hm, s=s) <= old * (1 + 1e-12):
                    break
    mask = _top_s_mask(best_H, s)
    rep.constants["rho"] = best
    rep.passed = bool(best < 1.0)
    rep.samples = count
    rep.witness.update({"H": best_H, "S": SparsityPattern.from_mask(mask, s)})
    return rep


def estimate_robust_nsp(op: MeasurementOp, s: int, trials: int = 500, seed=0,
                        extra_H=None, rho_grid=None) -> ConditionReport:
    """Fit ``(rho, beta)`` with ``||H_S||_1 <= rho ||H_{-S}||_1 + beta |Phi(H)|_2`` on samples.

    Samples are kernel directions, kernel directions plus small perturbations
    and Gaussian matrices, each with its worst ``s``-pattern. For each
    ``rho`` in the grid the smallest valid ``beta`` is computed; the returned
    pair minimizes ``2 (1 + rho) beta / (1 - rho)``.
    """
    n = op.n
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= n, got s={s}")
    rng = np.random.default_rng(seed)
    K = linalg.null_space(op.matrix())
    Hs = []
    for _ in range(trials):
        R = rng.standard_normal((n, n))
        Hs.append(R)
        if K.shape[1]:
            Hk = (K @ rng.standard_normal(K.shape[1])).reshape(n, n)
            Hk /= np.linalg.norm(Hk)
            Hs.append(Hk)
            Hs.append(Hk + 10.0 ** rng.uniform(-4, -1) * R / np.linalg.norm(R))
    if extra_H is not None:
        Hs.extend(np.asarray(H, dtype=float) for H in extra_H)
    grid = np.round(np.arange(1, 10) * 0.1, 10) if rho_grid is None else np.asarray(rho_grid)

    a = np.empty(len(Hs))
    b = np.empty(len(Hs))
    c = np.empty(len(Hs))
    for k, H in enumerate(Hs):
        srt = -np.sort(-np.abs(H), axis=0)
        a[k] = srt[:s].sum(axis=0).max()
        b[k] = srt[s:].sum(axis=0).max() if s < n else 0.0
        c[k] = np.linalg.norm(op.apply(H))
    kern = c <= 1e-12 * np.maximum(1.0, np.sqrt([np.sum(H * H) for H in Hs]))

    betas, wits = [], []
    for rho in grid:
        excess = np.maximum(a - rho * b, 0.0)
        if np.any(excess[kern] > 1e-12 * np.maximum(a[kern], 1.0)):
            betas.append(math.inf)
            wits.append(int(np.flatnonzero(kern & (excess > 0))[0]))
            continue
        q = np.where(kern, 0.0, excess / np.where(kern, 1.0, c))
        k = int(np.argmax(q))
        betas.append(float(q[k]))
        wits.append(k)
    betas = np.array(betas)
    score = np.where(np.isfinite(betas), 2 * (1 + grid) * betas / (1 - grid), math.inf)
    i = int(np.argmin(score))
    rho, beta = float(grid[i]), float(betas[i])
    rep = ConditionReport("robust_nsp", {"rho": rho, "beta": beta}, bool(np.isfinite(beta)),
                          "sampled-estimate", samples=len(Hs))
    rep.notes.append("fit holds on the sampled directions only")
    H = Hs[wits[i]]
    rep.witness.update({"H": H, "S": SparsityPattern.from_mask(_top_s_mask(H, s), s),
                        "rho_grid": grid.tolist(), "beta_grid": betas.tolist()})
    return rep


# --------------------------------------------------------------------------
# M-RIP

def compute_mrip_constants(op: MeasurementOp, s: int, samples: int = 200, seed=0,
                           rtol: float = 1e-12) -> ConditionReport:
    """``delta_s`` and ``Delta_s`` of the two-sided isometry and cross-correlation bounds.

    ``delta_s`` is the largest ``|lambda - 1|`` over eigenvalues of the
    Gram matrix on each pattern with ``min(s, n)`` entries per column.
    ``Delta_s`` is infinite as soon as basis images from two different
    columns correlate: ``Z = E_ij`` and ``W = E_i'j'`` with ``j != j'`` have
    ``sum_j |z_j|_2 |w_j|_2 = 0``. Otherwise the images of distinct columns
    are orthogonal and the bound reduces to ``n`` times the largest spectral
    norm of a within-column Gram block over disjoint row sets.
    """
    n = op.n
    if not 1 <= s <= n:
        raise ParameterError(f"need 1 <= s <= n, got s={s}")
    exact = _exact_scale(n, s)
    k = min(s, n)
    Phi = op.matrix()
    G = Phi.T @ Phi
    scale = max(float(np.abs(G).max()), 1e-300)
    rng = np.random.default_rng(seed)

    if exact:
        patterns = list(SparsityPattern.enumerate(n, s))
    else:
        patterns = [SparsityPattern(tuple(tuple(rng.choice(n, k, replace=False)) for _ in range(n)), s)
                    for _ in range(samples)]
    delta, dwit = 0.0, None
    for P in patterns:
        idx = P.flat_indices()
        ev = np.linalg.eigvalsh(G[np.ix_(idx, idx)])
        d = max(abs(ev[-1] - 1.0), abs(1.0 - ev[0]))
        if d > delta:
            delta, dwit = float(d), P

    col = np.arange(n * n) % n
    cross = np.abs(G) * (col[:, None] != col[None, :])
    Delta, Dwit = 0.0, None
    if cross.max() > rtol * scale:
        p, q = np.unravel_index(int(np.argmax(cross)), cross.shape)
        Delta = math.inf
        Dwit = {"Z": (divmod(int(p), n)), "W": (divmod(int(q), n))}
    else:
        rows = list(itertools.combinations(range(n), k))
        for j in range(n):
            for Sj in rows:
                rest = [i for i in range(n) if i not in Sj]
                for Tj in itertools.combinations(rest, min(k, len(rest))):
                    if not Tj:
                        continue
                    a = np.array(Sj) * n + j
                    b = np.array(Tj) * n + j
                    v = n * float(np.linalg.norm(G[np.ix_(a, b)], 2))
                    if v > Delta:
                        Delta, Dwit = v, {"column": j, "S": Sj, "T": Tj}
    passed = bool(delta + 1.25 * Delta < 1.0)
    rep = ConditionReport("mrip", {"delta_s": delta, "Delta_s": Delta}, passed,
                          "exact-enumeration" if exact else "sampled-lower-bound",
                          samples=len(patterns))
    rep.witness.update({"delta_pattern": dwit, "Delta_pair": Dwit})
    return rep


def rip_to_nsp_constants(delta_s: float, Delta_s: float, s: int):
    """``rho = Delta/(1 - delta - Delta/4)``, ``beta = sqrt(s (1 + delta))/(1 - delta - Delta/4)``."""
    den = 1.0 - delta_s - Delta_s / 4.0
    if not den > 0:
        raise ConditionViolatedError(f"1 - delta_s - Delta_s/4 = {den} is not positive")
    return Delta_s / den, math.sqrt(s) * math.sqrt(1.0 + delta_s) / den


# --------------------------------------------------------------------------
# flatness condition

def check_flatness_condition(op: MeasurementOp, S, z=None, tol: float = 1e-10) -> ConditionReport:
    """Per-column injectivity of ``z -> (Phi_S^T z)_j`` and, given ``z``, its residual variant.

    The literal check needs rank ``m`` (measurement dimension) for every
    column map, impossible whenever ``m > |S_j|``. The residual variant only
    asks that ``Phi_S^T z`` has no zero column for the supplied ``z``.
    """
    n = op.n
    mask = _pattern_mask(S, n)
    Phi = op.matrix()
    m = Phi.shape[0]
    ranks = []
    for j in range(n):
        cols = np.flatnonzero(mask[:, j]) * n + j
        if cols.size == 0:
            ranks.append(0)
            continue
        sv = np.linalg.svd(Phi[:, cols], compute_uv=False)
        ranks.append(int((sv > tol * max(sv.max(), 1e-300)).sum()) if sv.max() > 0 else 0)
    passed = all(r == m for r in ranks)
    rep = ConditionReport("flatness", {"min_rank": min(ranks), "m": m}, passed, "exact-enumeration")
    rep.witness["ranks"] = ranks
    if not passed and m > int(mask.sum(axis=0).min()):
        rep.notes.append("m exceeds some |S_j|: per-column injectivity is structurally impossible")
    if z is not None:
        Zt = np.where(mask, op.adjoint(z), 0.0)
        colmax = np.abs(Zt).max(axis=0)
        thresh = tol * max(float(np.abs(Zt).max()), 1e-300)
        res_ok = bool(np.all(colmax > thresh))
        rep.constants["residual_min_colmax"] = float(colmax.min())
        rep.constants["residual_pass"] = res_ok
    return rep


# --------------------------------------------------------------------------
# ERC and the stability report

def _embed_rows(M, idx, n):
    out = np.zeros((n * n, M.shape[1]))
    out[idx] = M
    return out


def _erc_composite(op: MeasurementOp, S):
    n = op.n
    mask = _pattern_mask(S, n)
    info = normal_matrix(op, mask)
    Pinv, idx = pseudo_inverse_matrix(op, mask, info)
    off = np.flatnonzero(~mask.ravel())
    C = np.zeros((n * n, n * n))
    if off.size:
        C[np.ix_(idx, off)] = Pinv @ op.columns(off)
    return C, info


def check_erc(op: MeasurementOp, S, mode: str = "auto") -> ConditionReport:
    """``N((Phi_S^T Phi_S)^{-1} Phi_S^T Phi_{-S}: ||.||_1 -> ||.||_1) < 1``.

    ``S`` is a pattern (or mask) or an integer ``s``; in the latter case the
    value is the maximum over all patterns with ``s`` entries per column.
    """
    n = op.n
    if isinstance(S, (int, np.integer)):
        pats = list(SparsityPattern.enumerate(n, int(S)))
    else:
        pats = [S]
    worst, wit, method = -1.0, None, "exact"
    for P in pats:
        C, _ = _erc_composite(op, P)
        res = opnorm_exotic(C, "l1", "l1", mode, details=True)
        if res.method != "exact":
            method = res.method
        if res.value > worst:
            worst, wit = res.value, (P, res.witness)
    rep = ConditionReport("erc", {"rho_erc": worst}, bool(worst < 1.0),
                          "exact-enumeration" if method == "exact" else "sampled-lower-bound",
                          samples=len(pats))
    rep.witness.update({"S": wit[0], "H": wit[1].reshape(n, n)})
    return rep


def _sphere_min(M, shape, starts, rng, step0=0.5, decay=0.9, floor=1e-8, basis=None):
    """Multi-start projected subgradient descent of ``dual(M z)`` over ``|z|_2 = 1``.

    ``basis`` (orthonormal columns) restricts ``z`` to a subspace.
    """
    B = np.eye(M.shape[1]) if basis is None else basis
    MB = M @ B
    d = MB.shape[1]
    W = rng.standard_normal((starts, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)

    def f(W):
        return _batch_norm(W @ MB.T, "dual", shape)

    vals = f(W)
    best = vals.copy()
    bestW = W.copy()
    step = step0
    while step >= floor:
        V = (W @ MB.T).reshape(starts, *shape)
        rows = np.abs(V).argmax(axis=1)
        E = np.zeros_like(V)
        sidx = np.arange(starts)[:, None]
        cidx = np.arange(shape[1])[None, :]
        E[sidx, rows, cidx] = np.sign(V[sidx, rows, cidx])
        g = E.reshape(starts, -1) @ MB
        g -= (g * W).sum(axis=1, keepdims=True) * W
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        W = W - step * np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        vals = f(W)
        better = vals < best
        best[better] = vals[better]
        bestW[better] = W[better]
        step *= decay
    k = int(np.argmin(best))
    return float(best[k]), B @ bestW[k]


def thm41_report(op: MeasurementOp, S, eta: float, starts: int = 200, seed=0) -> ConditionReport:
    """Support, flatness, robustness and sign-stability constants for pattern ``S``.

    Constants
    ---------
    A_min : ``inf ||Phi_S^T z||^*`` over unit ``z`` in the whole measurement
        space (zero when ``Phi_S`` has fewer than ``m`` independent columns).
    A_min_range : the same infimum with ``z`` restricted to ``range(Phi_S)``.
    N_left : ``N(Phi_{-S}^T (Phi_S Phi_S^{*-1} - I): l2 -> dual)``.
    N_erc_dual : ``N(Phi_S^{*-1} Phi_{-S}: dual -> dual)``.
    robust_fro, robust_l1, robust_max : ``2 N(Phi_S^{*-1}: l2 -> alpha)``.
    sign_threshold : ``eta (N(Phi_S^{*-1}: l2 -> max) + N(Phi_S^T: l2 -> dual) N(G^{-1}: dual -> max))``.
    """
    n = op.n
    mask = _pattern_mask(S, n)
    info = normal_matrix(op, mask)
    if not info.bijective:
        raise SingularityError(
            f"Gram matrix on S is singular (smallest eigenvalue {info.smallest_eigenvalue:.3e})",
            info.smallest_eigenvalue)
    idx = info.indices
    PhiS = info.PhiS
    m = PhiS.shape[0]
    Pinv, _ = pseudo_inverse_matrix(op, mask, info)
    Pinv_full = _embed_rows(Pinv, idx, n)          # Phi_S^{*-1}: R^m -> n x n
    PhiST = _embed_rows(PhiS.T, idx, n)            # Phi_S^T: R^m -> n x n
    Ginv = np.linalg.inv(info.gram)
    Ginv_full = np.zeros((n * n, n * n))
    Ginv_full[np.ix_(idx, idx)] = Ginv
    off = np.flatnonzero(~mask.ravel())
    Phi_off = op.columns(off)
    rng = np.random.default_rng(seed)
    consts = {}
    notes = []
    wit = {}

    # A_min over the whole measurement space
    rank = np.linalg.matrix_rank(PhiS)
    if rank < m:
        z = linalg.null_space(PhiS.T)[:, 0]
        consts["A_min"] = float(dual_norm((PhiST @ z).reshape(n, n)))
        wit["A_min_z"] = z
        notes.append("A_min = 0: Phi_S^T has a nontrivial kernel (rank < m)")
    else:
        val, z = _sphere_min(PhiST, (n, n), starts, rng)
        consts["A_min"] = val
        wit["A_min_z"] = z
    Q = linalg.orth(PhiS)
    val, z = _sphere_min(PhiST, (n, n), starts, rng, basis=Q)
    consts["A_min_range"] = val
    wit["A_min_range_z"] = z
    notes.append("A_min values are sampled upper bounds on the infimum")

    # condition (3)
    left = np.zeros((n * n, m))
    if off.size:
        left[off] = Phi_off.T @ (PhiS @ Pinv - np.eye(m))
    consts["N_left"] = opnorm_exotic(left, "l2", "dual", in_shape=(m,), out_shape=(n, n))
    C = np.zeros((n * n, n * n))
    if off.size:
        C[np.ix_(idx, off)] = Pinv @ Phi_off
    consts["N_erc_dual"] = opnorm_exotic(C, "dual", "dual")
    rhs = consts["A_min"] * (1.0 - consts["N_erc_dual"])
    consts["cond3_pass"] = bool(consts["N_left"] < rhs)
    consts["cond3_range_pass"] = bool(consts["N_left"] < consts["A_min_range"] * (1.0 - consts["N_erc_dual"]))

    for tag, key in (("fro", "robust_fro"), ("l1", "robust_l1"), ("max", "robust_max")):
        consts[key] = 2.0 * opnorm_exotic(Pinv_full, "l2", tag, in_shape=(m,), out_shape=(n, n))
    n_pinv_max = consts["robust_max"] / 2.0
    n_phist = opnorm_exotic(PhiST, "l2", "dual", in_shape=(m,), out_shape=(n, n))
    n_ginv = opnorm_exotic(Ginv_full, "dual", "max")
    consts["N_PhiST_l2_dual"] = n_phist
    consts["N_Ginv_dual_max"] = n_ginv
    consts["sign_threshold"] = float(eta * (n_pinv_max + n_phist * n_ginv))

    flat = check_flatness_condition(op, mask)
    consts["flatness_pass"] = flat.passed
    consts["bijective"] = info.bijective
    passed = bool(flat.passed and info.bijective and consts["cond3_pass"])
    if not flat.passed:
        notes.extend(flat.notes)
    rep = ConditionReport("thm41", consts, passed, "sampled-estimate", samples=2 * starts,
                          notes=notes, witness=wit)
    return rep
