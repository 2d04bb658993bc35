"""``quadtail`` command line.

Exit codes: 0 success, 1 usage error, 2 numerical failure (including a
failing ``verify`` suite).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import __version__, cramer, edgeworth, estimate, gaussref, model, tilt, verify
from .gaussref import QuadratureError, TiltTooStrongError


class UsageError(Exception):
    pass


NUMERICAL_ERRORS = (
    QuadratureError,
    TiltTooStrongError,
    tilt.TiltUndefinedError,
    tilt.OutsideRegimeError,
    estimate.InsufficientSignalError,
    estimate.GridTooLargeError,
    cramer.RegimeError,
    FloatingPointError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# argument parsing helpers


def parse_grid(text: str, kind=float) -> list:
    """``"1,2,3"`` or ``"start:stop:count"`` (inclusive, evenly spaced)."""
    text = text.strip()
    if text.count(":") == 2:
        a, b, k = text.split(":")
        vals = np.linspace(float(a), float(b), int(k))
        return [kind(round(v)) if kind is int else float(v) for v in vals]
    out = [kind(float(v)) if kind is int else float(v) for v in text.split(",") if v.strip()]
    if not out:
        raise UsageError("empty grid")
    return out


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v.strip()])


def parse_q(text: str | None, dim: int | None) -> model.QuadForm:
    if text is None:
        if dim is None:
            raise UsageError("--q is required")
        return model.identity_form(dim)
    path = Path(text)
    if path.exists():
        tree = model._load_tree(path)
        vals = tree.get("eigenvalues", tree.get("q")) if isinstance(tree, dict) else tree
        if vals is None:
            raise UsageError(f"{text}: expected an 'eigenvalues' list")
    else:
        vals = [float(v) for v in text.split(",") if v.strip()]
    form = model.quad_form(vals)
    if dim is not None and form.dim != dim:
        raise UsageError(f"quadratic form has dimension {form.dim}, law has dimension {dim}")
    return form


def _workers(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("QUADTAIL_WORKERS")
    return int(env) if env else 1


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


class Writer:
    """Header line plus CSV or JSON-lines records."""

    def __init__(self, stream: TextIO, fmt: str, header: dict):
        self.stream = stream
        self.fmt = fmt
        self.columns: list[str] | None = None
        self.header = "# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n"

    def _start(self):
        if self.header:
            self.stream.write(self.header)
            self.header = ""

    def row(self, rec: dict):
        self._start()
        if self.fmt == "jsonl":
            self.stream.write(json.dumps(_jsonable(rec), sort_keys=False) + "\n")
            return
        if self.columns is None:
            self.columns = list(rec)
            csv.writer(self.stream, lineterminator="\n").writerow(self.columns)
        csv.writer(self.stream, lineterminator="\n").writerow([_fmt(rec.get(c)) for c in self.columns])


def _config_hash(args: argparse.Namespace) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "workers")}  # workers never change results
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _open_writer(args, fmt: str | None = None) -> Writer:
    header = {"quadtail": __version__, "command": args.command, "seed": getattr(args, "seed", None), "config": _config_hash(args)}
    stream = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    return Writer(stream, fmt or args.format, header)


def _close(w: Writer):
    w._start()
    if w.stream is not sys.stdout:
        w.stream.close()
    else:
        w.stream.flush()


def _need_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required for randomized runs")


# ---------------------------------------------------------------------------
# subcommands


def cmd_tail_ref(args) -> int:
    q = parse_q(args.q, None)
    w = _open_writer(args)
    for x in parse_grid(args.x):
        pr = gaussref.gaussian_ball_tail(q, x)
        if x > 1:
            b = gaussref.chisq_lower_bound(q, x)
            bound, p, r = b.bound, b.p, b.r
        else:
            bound, p, r = float("nan"), None, None
        w.row({"x": x, "probability": pr.value, "err_estimate": pr.err, "lower_bound": bound, "p": p, "r": r})
    _close(w)
    return 0


def cmd_estimate(args) -> int:
    spec = model.load_spec(args.spec)
    q = parse_q(args.q, spec.dim)
    if args.method != "exact":
        _need_seed(args)
    w = _open_writer(args, fmt=args.format or "jsonl")
    for n in parse_grid(args.n, int):
        for x in parse_grid(args.x):
            if args.method == "exact":
                est = estimate.exact_tail(spec, q, x, n)
            elif args.method == "crude":
                est = estimate.crude_mc(spec, q, x, n, args.samples, args.seed, workers=_workers(args.workers))
            else:
                est = estimate.tilted_is(
                    spec, q, x, n, args.samples, args.seed, workers=_workers(args.workers), pool_size=args.pool_size, guard=args.guard
                )
            w.row({"n": n, "x": x, **est.as_dict()})
    _close(w)
    return 0


def _scan(args, spec, q):
    if args.x is None or args.n is None:
        raise UsageError(f"{args.command}: --x and --n are required")
    all_exact = all(estimate.exact_admissible(spec, n) for n in parse_grid(args.n, int))
    if args.method in ("crude", "tilted-is") or (args.method == "auto" and not all_exact):
        _need_seed(args)
    return estimate.ratio_scan(
        spec,
        q,
        parse_grid(args.x),
        parse_grid(args.n, int),
        method=args.method,
        budget=args.budget,
        seed=args.seed if args.seed is not None else 0,
        workers=_workers(args.workers),
        pair=args.pair,
        guard=args.guard,
    )


def _row_record(r: estimate.RatioRow) -> dict:
    return {
        "n": r.n,
        "x": r.x,
        "p_hat": r.p_hat.value,
        "p_hat_se": r.p_hat.std_err,
        "method": r.p_hat.method,
        "p_ref": r.p_ref,
        "ratio_minus_1": r.ratio_minus_1,
        "ratio_se": r.ratio_se,
        "paired_abs": r.paired_abs,
        "paired_se": r.paired_se,
    }


def cmd_ratio_scan(args) -> int:
    spec = model.load_spec(args.spec)
    q = parse_q(args.q, spec.dim)
    rows = _scan(args, spec, q)
    w = _open_writer(args)
    for r in rows:
        w.row(_row_record(r))
    _close(w)
    return 0


def _read_rows(path: str) -> list[estimate.RatioRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        def num(key):
            return float(rec[key]) if rec.get(key) not in (None, "") else None

        est = estimate.TailEstimate(num("p_hat"), num("p_hat_se"), 0, rec.get("method", ""), None)
        rows.append(
            estimate.RatioRow(int(rec["n"]), num("x"), est, num("p_ref"), num("ratio_minus_1"), num("ratio_se"), num("paired_abs"), num("paired_se"))
        )
    return rows


def cmd_rate_fit(args) -> int:
    if args.rows:
        rows = _read_rows(args.rows)
    else:
        if not args.spec:
            raise UsageError("rate-fit needs --rows or --spec")
        spec = model.load_spec(args.spec)
        rows = _scan(args, spec, parse_q(args.q, spec.dim))
    w = _open_writer(args)
    for x in sorted({r.x for r in rows}):
        fit = estimate.rate_fit(rows, x)
        w.row(
            {
                "x": x,
                "slope": fit.slope,
                "slope_se": fit.slope_se,
                "used_n": " ".join(map(str, fit.used_n)),
                "excluded_n": " ".join(map(str, fit.excluded_n)),
            }
        )
    _close(w)
    return 0


def cmd_edgeworth(args) -> int:
    spec = model.load_spec(args.spec)
    q = parse_q(args.q, spec.dim)
    if spec.dim >= 3 and not spec_is_symmetric(spec):
        _need_seed(args)
    centre = parse_vector(args.centre) if args.centre else np.zeros(spec.dim)
    if centre.shape != (spec.dim,):
        raise UsageError("--centre has the wrong dimension")
    radii = parse_grid(args.a_grid)
    w = _open_writer(args)
    for n in parse_grid(args.n, int):
        m = edgeworth.model_for_sum(spec, q, n)
        res = edgeworth.ball_mass_grid(m, centre, radii, samples=args.samples, seed=args.seed or 0, workers=_workers(args.workers))
        for a, bm in zip(radii, res):
            w.row({"n": n, "a": a, "leading": bm.leading, "correction": bm.correction, "total": bm.total, "err_estimate": bm.err})
    _close(w)
    return 0


def spec_is_symmetric(spec) -> bool:
    return not np.any(model.moments(spec).third_tensor)


def cmd_tilt_inspect(args) -> int:
    spec = model.load_spec(args.spec)
    q = parse_q(args.q, spec.dim)
    params = tilt.make_params(args.x, args.n, spec.dim, guard=args.guard)
    if args.z.startswith("random:"):
        seed = int(args.z.split(":", 1)[1])
        z = tilt.sample_zx(params, np.random.Generator(np.random.Philox(seed)), 1)[0]
    else:
        z = parse_vector(args.z)
    if z.shape != (spec.dim,):
        raise UsageError("--z has the wrong dimension")
    y = parse_vector(args.y) if args.y else np.zeros(spec.dim)
    law = tilt.tilted_law(spec, q, params, z)
    bt = tilt.b_terms(spec, q, params, z, y)
    a_grid = parse_grid(args.a_grid) if args.a_grid else list(np.linspace(0.0, 10.0 * args.x, 11))
    rec = {
        "quadtail": __version__,
        "x": params.x,
        "n": params.n,
        "h": params.h,
        "z0": params.z0,
        "kappa": params.kappa,
        "z": z,
        "mu_tilde": law.mu_tilde,
        "Sigma_tilde": law.sigma_tilde,
        "lambda_tilde": law.lambda_tilde,
        "log_mixture_weight": tilt.log_mixture_weight(spec, q, params, z),
        "y": y,
        "B": {"B0": bt.b0, "B1": bt.b1, "B2": bt.b2, "B3": bt.b3},
        "m": {"a": a_grid, "log_m": tilt.log_m_function(params, np.array(a_grid))},
    }
    stream = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    stream.write(json.dumps(_jsonable(rec), indent=2) + "\n")
    if stream is not sys.stdout:
        stream.close()
    return 0


def cmd_cubic_limit(args) -> int:
    spec = model.load_spec(args.spec)
    n_grid = parse_grid(args.n_grid, int)
    randomized = spec.dim > 1 or not all(estimate.exact_admissible(spec, n) for n in n_grid)
    if randomized:
        _need_seed(args)
    rows = cramer.nonconvergence_demo(
        spec, args.c, n_grid, pairs=args.pairs, seed=args.seed or 0, samples=args.samples, workers=_workers(args.workers)
    )
    w = _open_writer(args)
    for r in rows:
        w.row(
            {
                "n": r.n,
                "x_n": r.x_n,
                "exact_ratio": r.exact_ratio,
                "ratio_se": r.ratio_se,
                "predicted_factor": r.predicted_factor,
                "predicted_se": r.predicted_se,
                "gap": r.gap,
                "method": r.method,
            }
        )
    _close(w)
    return 0


def cmd_verify(args) -> int:
    results = verify.run_suite(seed=args.seed if args.seed is not None else 0, inject_failure=args.inject_failure)
    w = _open_writer(args)
    for r in results:
        w.row(r.as_dict())
    _close(w)
    failed = [r.name for r in results if not r.passed]
    print(f"verify: {len(results) - len(failed)}/{len(results)} passed" + (f"; FAIL: {', '.join(failed)}" if failed else ""), file=sys.stderr)
    return 2 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quadtail", description="Tail probabilities of quadratic forms of normalized sums.")
    p.add_argument("--version", action="version", version=f"quadtail {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, fmt_default="csv"):
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--format", choices=("csv", "jsonl"), default=fmt_default)

    def randomized(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="threads (default $QUADTAIL_WORKERS or 1)")

    sp = sub.add_parser("tail-ref", help="Gaussian reference tail and lower bound")
    sp.add_argument("--q", required=True, help="eigenvalues inline (1,0.5) or a JSON/TOML file")
    sp.add_argument("--x", required=True, help="grid: a,b,c or start:stop:count")
    common(sp)
    sp.set_defaults(func=cmd_tail_ref)

    sp = sub.add_parser("estimate", help="estimate P(|D W| > x)")
    sp.add_argument("--method", choices=("crude", "tilted-is", "exact"), required=True)
    sp.add_argument("--spec", required=True, help="built-in law name or JSON/TOML file")
    sp.add_argument("--q")
    sp.add_argument("--x", required=True)
    sp.add_argument("--n", required=True)
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--pool-size", type=int, default=10_000)
    sp.add_argument("--guard", type=float, default=tilt.DEFAULT_GUARD)
    randomized(sp)
    common(sp, fmt_default=None)
    sp.set_defaults(func=cmd_estimate)

    for name, fn in (("ratio-scan", cmd_ratio_scan), ("rate-fit", cmd_rate_fit)):
        sp = sub.add_parser(name, help="ratio to the Gaussian reference" if name == "ratio-scan" else "log-log slope of |ratio - 1|")
        if name == "rate-fit":
            sp.add_argument("--rows", help="CSV written by ratio-scan")
            sp.add_argument("--spec")
            sp.add_argument("--x")
            sp.add_argument("--n")
        else:
            sp.add_argument("--spec", required=True)
            sp.add_argument("--x", required=True)
            sp.add_argument("--n", required=True)
        sp.add_argument("--q")
        sp.add_argument("--method", choices=("auto", "crude", "tilted-is", "exact"), default="auto")
        sp.add_argument("--budget", type=int, default=100_000)
        sp.add_argument("--pair", action="store_true", help="average |ratio - 1| over n and n + 2")
        sp.add_argument("--guard", type=float, default=tilt.DEFAULT_GUARD)
        randomized(sp)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("edgeworth", help="ball masses of the two-term expansion")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--q")
    sp.add_argument("--n", required=True)
    sp.add_argument("--a-grid", required=True)
    sp.add_argument("--centre")
    sp.add_argument("--samples", type=int, default=1_000_000)
    randomized(sp)
    common(sp)
    sp.set_defaults(func=cmd_edgeworth)

    sp = sub.add_parser("tilt-inspect", help="tilt parameters and tilted moments at one z")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--q")
    sp.add_argument("--x", type=float, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--z", required=True, help="vector z1,z2,... or random:<seed>")
    sp.add_argument("--y")
    sp.add_argument("--a-grid")
    sp.add_argument("--guard", type=float, default=tilt.DEFAULT_GUARD)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_tilt_inspect)

    sp = sub.add_parser("appendix-limit", help="ratio along x = c n^(1/6) against its limit")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--c", type=float, required=True)
    sp.add_argument("--n-grid", required=True)
    sp.add_argument("--pairs", type=int, default=1_000_000)
    sp.add_argument("--samples", type=int, default=200_000)
    randomized(sp)
    common(sp)
    sp.set_defaults(func=cmd_cubic_limit)

    sp = sub.add_parser("verify", help="run the invariant suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--inject-failure", metavar="CHECK", help="force the named check to fail (debugging)")
    common(sp)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if getattr(args, "samples", None) is not None and args.samples < 1:
            raise UsageError("--samples must be >= 1")
        if args.command == "verify" and args.inject_failure and args.inject_failure not in verify.CHECKS:
            raise UsageError(f"unknown check {args.inject_failure!r}")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"quadtail: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"quadtail: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
