"""Command-line entry point: ``colflat {gen,solve,check,width,sweep}``.

Exit codes: 0 success, 2 parameter error, 3 no convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import experiments
from .conditions import (check_erc, check_flatness_condition, compute_mrip_constants,
                         estimate_nsp_ratio, estimate_robust_nsp, thm41_report)
from .errors import ConditionViolatedError, NoConvergenceError, ParameterError, SingularityError
from .norms import norm_colmax_l1
from .operators import DISTRIBUTIONS, make_identity
from .signal_model import gen_sparse_flat_signal, support_pattern
from .solver import SolverConfig, solve_constrained, solve_penalized
from .widths import (estimate_lambda_min, mc_width_kronecker, mc_width_sq, q_xi_estimate)

EXIT_OK, EXIT_PARAM, EXIT_NOCONV, EXIT_IO = 0, 2, 3, 4
CHECKS = ("nsp", "robust_nsp", "mrip", "erc", "flatness", "thm41")

log = logging.getLogger("colflat")


def parse_op(spec: str):
    """``dense-<dist>``, ``kronecker[-<dist>]`` or ``identity`` -> (family, dist)."""
    if spec == "identity":
        return "identity", None
    family, _, dist = spec.partition("-")
    dist = dist or "gaussian"
    if family not in ("dense", "kronecker") or dist not in DISTRIBUTIONS:
        raise ParameterError(f"unknown operator {spec!r}; use dense-<dist>, kronecker[-<dist>] "
                             f"or identity with dist in {tuple(DISTRIBUTIONS)}")
    return family, dist


def build_op(spec: str, n: int, m: int | None, seed):
    family, dist = parse_op(spec)
    if family == "identity":
        return make_identity(n)
    if m is None:
        raise ParameterError("--m is required for this operator")
    return experiments.make_operator(family, m, n, dist, seed)


def _seeds(seed):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else str(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _write_json(obj, path):
    text = json.dumps({k: _jsonable(v) for k, v in obj.items()}, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _read_signal(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return np.asarray(obj["signal"], dtype=float)


def cmd_gen(a):
    X = gen_sparse_flat_signal(a.n, a.s, a.r, seed=a.seed)
    _write_json({"n": a.n, "s": a.s, "r": a.r if a.r is not None else a.n, "seed": a.seed,
                 "signal": X}, a.out)


def cmd_solve(a):
    ss, so, sn = _seeds(a.seed)
    if a.signal:
        X = _read_signal(a.signal)
        n = X.shape[0]
    else:
        n = a.n
        X = gen_sparse_flat_signal(n, a.s, a.r, seed=ss)
    op = build_op(a.op, n, a.m, so)
    E = experiments.noise_matrix(op.out_shape, a.eta, np.random.default_rng(sn))
    y = op.apply(X) + E
    cfg = SolverConfig(max_iters=a.max_iters)
    res = solve_penalized(op, y, a.gamma, cfg) if a.gamma is not None else solve_constrained(op, y, a.eta, cfg)
    rec = {"op": a.op, "n": n, "m": a.m, "eta": a.eta, "seed": a.seed}
    rec.update(res.as_record())
    rec["signal"] = X
    rec["error_fro"] = float(np.linalg.norm(res.minimizer - X))
    rec["error_l1max"] = norm_colmax_l1(res.minimizer - X)
    _write_json(rec, a.out)
    if not res.converged and a.strict:
        raise NoConvergenceError(f"solver status {res.status}")


def _print_record(rec, prefix=""):
    for k, v in rec.items():
        print(f"{prefix}{k}={_jsonable(v)}")


def cmd_check(a):
    ss, so, _ = _seeds(a.seed)
    op = build_op(a.op, a.n, a.m, so)
    X = gen_sparse_flat_signal(a.n, a.s, seed=ss)
    S = support_pattern(X)
    wanted = a.checks.split(",") if a.checks else list(CHECKS)
    for c in wanted:
        if c not in CHECKS:
            raise ParameterError(f"unknown check {c!r}; choose from {CHECKS}")
    for c in wanted:
        try:
            if c == "nsp":
                rep = estimate_nsp_ratio(op, a.s, seed=a.seed)
            elif c == "robust_nsp":
                rep = estimate_robust_nsp(op, a.s, seed=a.seed)
            elif c == "mrip":
                rep = compute_mrip_constants(op, a.s, seed=a.seed)
            elif c == "erc":
                rep = check_erc(op, S)
            elif c == "flatness":
                rep = check_flatness_condition(op, S)
            else:
                rep = thm41_report(op, S, a.eta, seed=a.seed)
        except (SingularityError, ConditionViolatedError) as exc:
            print(f"{c}.error={exc}")
            continue
        _print_record(rep.as_record(), f"{c}.")


def cmd_width(a):
    X = gen_sparse_flat_signal(a.n, a.s, a.r, seed=a.seed)
    if a.kind == "gaussian":
        est = mc_width_sq(X, a.samples, seed=a.seed)
    elif a.kind == "kronecker":
        if a.m is None:
            raise ParameterError("--m is required for kind kronecker")
        est = mc_width_kronecker(X, a.m, a.dist, a.samples, seed=a.seed)
    elif a.kind == "q_xi":
        est = q_xi_estimate(a.dist, a.n, samples=a.samples, seed=a.seed)
    else:
        op = build_op(a.op, a.n, a.m, _seeds(a.seed)[1])
        est = estimate_lambda_min(op, X, a.samples, seed=a.seed)
    rec = {"kind": est.kind, "estimate": est.mean, "std_error": est.std_error, "samples": est.samples}
    rec.update({k: v for k, v in est.extra.items() if np.isscalar(v)})
    _print_record(rec)


def cmd_sweep(a):
    cfg = experiments.load_config(a.config)
    res = experiments.run_experiment(cfg)
    out = a.out or cfg.output
    text = res.to_csv()
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    failed = sum(r.status not in ("ok", "trivial") for r in res.records)
    if failed:
        log.warning("%d of %d trials did not converge", failed, len(res.records))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colflat", description="Column-flat sparse matrix recovery toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write a random column-sparse flat signal as JSON")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--s", type=int, required=True)
    g.add_argument("--r", type=int, default=None, help="number of maximal columns (default n)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="-")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve one seeded instance and write a JSON record")
    s.add_argument("--op", default="dense-gaussian", help="dense-<dist>, kronecker[-<dist>] or identity")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--s", type=int, default=1)
    s.add_argument("--r", type=int, default=None)
    s.add_argument("--m", type=int, default=None, help="rows (dense) or factor rows (kronecker)")
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--gamma", type=float, default=None, help="solve the penalized problem instead")
    s.add_argument("--signal", default=None, help="JSON file from `gen` (overrides --n/--s/--r)")
    s.add_argument("--max-iters", type=int, default=20000)
    s.add_argument("--strict", action="store_true", help="exit 3 if the solver did not converge")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("check", help="run condition checkers and print key=value lines")
    c.add_argument("--op", default="dense-gaussian")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--m", type=int, default=None)
    c.add_argument("--s", type=int, required=True)
    c.add_argument("--eta", type=float, default=1.0, help="noise radius for thm41 thresholds")
    c.add_argument("--checks", default=None, help=f"comma list from {','.join(CHECKS)}")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    w = sub.add_parser("width", help="Monte-Carlo width estimators")
    w.add_argument("--kind", choices=("gaussian", "kronecker", "q_xi", "lambda_min"), default="gaussian")
    w.add_argument("--n", type=int, required=True)
    w.add_argument("--s", type=int, default=1)
    w.add_argument("--r", type=int, default=None)
    w.add_argument("--m", type=int, default=None)
    w.add_argument("--op", default="dense-gaussian", help="operator for lambda_min")
    w.add_argument("--dist", choices=tuple(DISTRIBUTIONS), default="gaussian")
    w.add_argument("--samples", type=int, default=1000)
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_width)

    sw = sub.add_parser("sweep", help="run an experiment config and write CSV",
                        description="Run a JSON experiment config.",
                        epilog=experiments.__doc__,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    sw.add_argument("config")
    sw.add_argument("--out", default=None, help="CSV path (default: config 'output' or stdout)")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    p = build_parser()
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if a.cmd == "solve" and a.signal is None and a.n is None:
        p.error("solve needs --n or --signal")
    try:
        a.func(a)
    except NoConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except (ParameterError, SingularityError, ConditionViolatedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
