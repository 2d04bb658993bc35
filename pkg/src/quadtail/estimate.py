"""Estimators of P(|D W| > x) for W = (X_1 + ... + X_n) / sqrt(n).

Randomized estimators split their budget into a fixed block schedule; each
block owns a substream keyed by ``(seed, tag, block)``, so results do not
depend on the number of worker threads.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .gaussref import gaussian_ball_tail
from .model import DistributionSpec, QuadForm, sample_sums
from .streams import block_sizes, substream
from .tilt import (
    DEFAULT_GUARD,
    log_m_function,
    m_table,
    make_params,
    sample_pool,
    sample_tilted_sums,
)

EXACT_METHODS = ("exact_lattice", "exact_binomial", "gaussian_ref")
MAX_CELLS = 4_000_000
EXACT_INT_MAX_N = 20_000
CHUNK = 1 << 16


class InsufficientSignalError(ValueError):
    pass


class GridTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class TailEstimate:
    value: float
    std_err: float
    n_samples: int
    method: str
    seed: int | None
    runtime_ms: float = field(default=0.0, compare=False)
    diagnostics: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        out = {
            "value": self.value,
            "std_err": self.std_err,
            "n_samples": self.n_samples,
            "method": self.method,
            "seed": self.seed,
        }
        out.update({k: v for k, v in sorted(self.diagnostics.items())})
        return out


def _map_blocks(fn: Callable[[int], object], count: int, workers: int) -> list:
    if workers <= 1 or count <= 1:
        return [fn(b) for b in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _default_blocks(total: int) -> int:
    return int(min(64, max(1, math.ceil(total / CHUNK))))


# ---------------------------------------------------------------------------
# crude Monte Carlo


def crude_mc(spec: DistributionSpec, q: QuadForm, x: float, n: int, samples: int, seed: int, workers: int = 1, n_blocks: int | None = None) -> TailEstimate:
    """Binomial-proportion estimate from direct simulation of W."""
    start = time.perf_counter()
    sizes = block_sizes(samples, n_blocks or _default_blocks(samples))
    thr = x * x * n

    def block(b: int) -> int:
        rng = substream(seed, "crude", b)
        hits = 0
        left = sizes[b]
        while left > 0:
            m = min(left, CHUNK)
            s = sample_sums(spec, rng, n, m)
            hits += int(np.count_nonzero(_kernels.weighted_sq_norms(s, q.eigenvalues) > thr))
            left -= m
        return hits

    hits = sum(_map_blocks(block, len(sizes), workers))
    p = hits / samples
    se = math.sqrt(p * (1.0 - p) / samples)
    return TailEstimate(p, se, samples, "crude", seed, 1e3 * (time.perf_counter() - start), {"hits": hits})


# ---------------------------------------------------------------------------
# tilted importance sampling


def tilted_is(
    spec: DistributionSpec,
    q: QuadForm,
    x: float,
    n: int,
    samples: int,
    seed: int,
    workers: int = 1,
    pool_size: int = 10_000,
    n_blocks: int = 32,
    guard: float | None = DEFAULT_GUARD,
    proposal: str = "adaptive",
) -> TailEstimate:
    """Importance sampler built on the Gaussian-mixed tilt.

    Each block draws a pool of ``z`` values (see ``sample_pool``), estimates ``M = E G^n(...)`` by
    the pool mean of the mixture weights, resamples ``z`` proportionally to
    the weights, draws one tilted sum per resampled ``z`` and averages
    ``1{|D W~| > x} / m(|D W~|)``.  The block estimate ``M * mean`` is unbiased
    given the pool, so block estimates are i.i.d. unbiased and the standard
    error comes from their spread.
    """
    start = time.perf_counter()
    if spec.dim != q.dim:
        raise ValueError("dimension mismatch between law and quadratic form")
    params = make_params(x, n, spec.dim, guard=guard)
    table = m_table(params)
    n_blocks = max(2, min(n_blocks, samples))
    sizes = block_sizes(samples, n_blocks)

    def block(b: int):
        rng = substream(seed, "tilted", b)
        z, logw = sample_pool(spec, q, params, rng, pool_size, proposal)
        top = float(np.max(logw))
        w = np.exp(logw - top)
        wsum = float(w.sum())
        log_mhat = top + math.log(wsum / pool_size)
        ess = wsum * wsum / float(w @ w)
        idx = rng.choice(pool_size, size=sizes[b], p=w / wsum)
        vals = np.empty(sizes[b])
        for lo in range(0, sizes[b], CHUNK):
            hi = min(lo + CHUNK, sizes[b])
            y = sample_tilted_sums(spec, q, params, z[idx[lo:hi]], rng)
            r = np.sqrt(np.einsum("ij,ij->i", y, y))
            v = _kernels.tail_weights(r, x, table.a0, table.da, table.log_m)
            miss = np.isnan(v)
            if miss.any():
                v[miss] = np.exp(-log_m_function(params, r[miss]))
            vals[lo:hi] = v
        mean = float(vals.mean())
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        pool_rel_se = math.sqrt(max(float(np.mean((w / w.mean() - 1.0) ** 2)), 0.0) / pool_size)
        return math.exp(log_mhat) * mean, log_mhat, mean, sd, ess, pool_rel_se, int(np.count_nonzero(vals))

    out = _map_blocks(block, n_blocks, workers)
    est = np.array([o[0] for o in out])
    weights = np.array(sizes, dtype=np.float64) / samples
    value = float(weights @ est)
    se = float(math.sqrt(np.sum(weights**2 * (est - value) ** 2) * n_blocks / (n_blocks - 1)))
    mhat = float(np.exp(np.mean([o[1] for o in out])))
    # zero-covariance delta method, for comparison only: it ignores pool noise
    stage2 = np.array([o[2] for o in out])
    s2_mean = float(weights @ stage2)
    s2_se = math.sqrt(sum(o[3] ** 2 for o in out) / samples / samples * (samples / n_blocks))
    pool_rel = math.sqrt(sum(o[5] ** 2 for o in out)) / n_blocks
    delta_se = mhat * s2_mean * math.sqrt((s2_se / s2_mean) ** 2 + pool_rel**2) if s2_mean > 0 else 0.0
    diag = {
        "h": params.h,
        "z0": params.z0,
        "kappa": params.kappa,
        "log_M_hat": float(np.mean([o[1] for o in out])),
        "pool_size": pool_size,
        "n_blocks": n_blocks,
        "min_pool_ess": float(min(o[4] for o in out)),
        "hit_fraction": float(sum(o[6] for o in out) / samples),
        "delta_method_se": float(delta_se),
    }
    return TailEstimate(min(max(value, 0.0), 1.0), se, samples, "tilted_is", seed, 1e3 * (time.perf_counter() - start), diag)


# ---------------------------------------------------------------------------
# exact oracles


def _rational(p: float, max_den: int = 1_000_000) -> Fraction | None:
    f = Fraction(p).limit_denominator(max_den)
    return f if abs(float(f) - p) <= 1e-15 else None


def _count_bounds(n: int, p: Fraction | float, x: float) -> tuple[int, int]:
    """Largest k with k - np < -x sqrt(npq) and smallest k with k - np > x sqrt(npq)."""
    xf = Fraction(x)
    pf = Fraction(p)
    mean = n * pf
    rhs = xf * xf * n * pf * (1 - pf)
    centre = float(mean)
    half = float(x) * math.sqrt(n * float(pf) * (1.0 - float(pf)))

    def outside(k: int) -> bool:
        return (k - mean) ** 2 > rhs

    hi = max(0, math.floor(centre + half) - 2)
    while hi <= n and not (hi > mean and outside(hi)):
        hi += 1
    lo = min(n, math.ceil(centre - half) + 2)
    while lo >= 0 and not (lo < mean and outside(lo)):
        lo -= 1
    return lo, hi


def _binomial_tail(n: int, p: Fraction, lo: int, hi: int) -> float:
    """P(K <= lo) + P(K >= hi) for K ~ Bin(n, p)."""
    if n <= EXACT_INT_MAX_N and p.denominator <= 1 << 16:
        a, b = p.numerator, p.denominator - p.numerator
        num = 0
        coef = 1
        for k in range(n + 1):
            if k <= lo or k >= hi:
                num += coef * a**k * b ** (n - k)
            coef = coef * (n - k) // (k + 1)
        return float(Fraction(num, p.denominator**n))
    pf = float(p)
    total = 0.0
    if lo >= 0:
        total += float(stats.binom.cdf(lo, n, pf))
    if hi <= n:
        total += float(stats.binom.sf(hi - 1, n, pf))
    return total


def exact_two_point(p: float, x: float, n: int) -> TailEstimate:
    """P(|W| > x) for the standardized two-point law with P(X = sqrt(q/p)) = p."""
    start = time.perf_counter()
    pf = _rational(p)
    if pf is None:
        pf = Fraction(p)
    if x < 0:
        return TailEstimate(1.0, 0.0, 0, "exact_binomial", None)
    lo, hi = _count_bounds(n, pf, x)
    value = _binomial_tail(n, pf, lo, hi)
    return TailEstimate(min(value, 1.0), 0.0, 0, "exact_binomial", None, 1e3 * (time.perf_counter() - start))


def exact_binomial(x: float, n: int) -> TailEstimate:
    """P(|S_n| > x sqrt(n)) for Rademacher steps, by exact integer summation."""
    return exact_two_point(0.5, x, n)


def _lattice_coords(values: np.ndarray, max_den: int = 64) -> tuple[float, float, np.ndarray]:
    """Write ``values = base + step * k`` with integers ``k >= 0``."""
    base = float(values.min())
    diffs = values - base
    pos = diffs[diffs > 1e-12 * max(1.0, abs(base))]
    if pos.size == 0:
        return base, 1.0, np.zeros(values.shape[0], dtype=np.int64)
    step = float(pos.min())
    den = 1
    for r in diffs / step:
        f = Fraction(float(r)).limit_denominator(max_den)
        if abs(float(f) - r) > 1e-9 * max(1.0, r):
            raise ValueError("support is not on a common lattice")
        den = den * f.denominator // math.gcd(den, f.denominator)
    step /= den
    k = np.rint(diffs / step).astype(np.int64)
    if np.max(np.abs(base + step * k - values)) > 1e-9 * max(1.0, np.max(np.abs(values))):
        raise ValueError("support is not on a common lattice")
    return base, step, k


def lattice_cells(spec: DistributionSpec, n: int) -> int:
    fin = spec.expand()
    spans = [int(_lattice_coords(fin.points[:, j])[2].max()) for j in range(spec.dim)]
    return int(np.prod([n * s + 1 for s in spans]))


def exact_lattice(spec: DistributionSpec, q: QuadForm, x: float, n: int, max_cells: int = MAX_CELLS) -> TailEstimate:
    """Exact tail of |D W| by repeated convolution of the law of X_1 on its lattice.

    All accumulated terms are nonnegative, so the float result carries only
    relative rounding error of order ``n * eps`` per cell.
    """
    start = time.perf_counter()
    if spec.kind == "gaussian":
        raise ValueError("Gaussian law has no lattice")
    d = spec.dim
    if d > 2:
        raise ValueError("exact lattice oracle supports d <= 2")
    fin = spec.expand()
    if fin.points.shape[0] > 16:
        raise ValueError("exact lattice oracle supports at most 16 support points")
    coords = [_lattice_coords(fin.points[:, j]) for j in range(d)]
    cells = int(np.prod([n * int(c[2].max()) + 1 for c in coords]))
    if cells > max_cells:
        raise GridTooLargeError(f"lattice grid would need {cells} cells (limit {max_cells})")
    steps = np.zeros((fin.points.shape[0], 2), dtype=np.int64)
    for j in range(d):
        steps[:, j] = coords[j][2]
    dist = _kernels.lattice_power(steps, fin.probs, n)
    rn = math.sqrt(n)
    sq = np.zeros(dist.shape)
    for j in range(d):
        base, step, _ = coords[j]
        vals = (n * base + step * np.arange(dist.shape[j])) / rn
        shape = [1, 1]
        shape[j] = -1
        sq = sq + q.eigenvalues[j] * vals.reshape(shape) ** 2
    thr = x * x
    tie = np.abs(sq - thr) <= 1e-12 * max(thr, 1.0)
    value = float(dist[(sq > thr) & ~tie].sum())
    total = float(dist.sum())
    diag = {"cells": cells, "mass_defect": abs(total - 1.0), "boundary_cells": int(np.count_nonzero(tie & (dist > 0)))}
    return TailEstimate(min(value, 1.0), 0.0, 0, "exact_lattice", None, 1e3 * (time.perf_counter() - start), diag)


def _two_point_p(spec: DistributionSpec) -> float | None:
    """p if ``spec`` is a standardized 1-d two-point law, else None."""
    if spec.kind != "finite" or spec.dim != 1 or spec.probs.shape[0] != 2:
        return None
    pts = spec.points[:, 0]
    i = int(np.argmax(pts))
    p = float(spec.probs[i])
    expect = np.array([-math.sqrt(p / (1 - p)), math.sqrt((1 - p) / p)])
    if np.allclose(np.sort(pts), expect, rtol=0, atol=1e-12):
        return p
    return None


def exact_tail(spec: DistributionSpec, q: QuadForm, x: float, n: int, max_cells: int = MAX_CELLS) -> TailEstimate:
    """The cheapest exact oracle admissible for ``spec``."""
    if spec.kind == "gaussian":
        pr = gaussian_ball_tail(q, x)
        return TailEstimate(pr.value, 0.0, 0, "gaussian_ref", None, 0.0, {"err": pr.err})
    p = _two_point_p(spec)
    if p is not None:
        return exact_two_point(p, x, n)
    return exact_lattice(spec, q, x, n, max_cells=max_cells)


def exact_admissible(spec: DistributionSpec, n: int, max_cells: int = MAX_CELLS) -> bool:
    if spec.kind == "gaussian" or _two_point_p(spec) is not None:
        return True
    if spec.dim > 2:
        return False
    try:
        fin = spec.expand()
        return fin.points.shape[0] <= 16 and lattice_cells(spec, n) <= max_cells
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# ratio experiments


@dataclass(frozen=True)
class RatioRow:
    n: int
    x: float
    p_hat: TailEstimate
    p_ref: float
    ratio_minus_1: float
    ratio_se: float
    paired_abs: float | None = None
    paired_se: float | None = None


def estimate_tail(spec, q, x, n, method: str = "auto", budget: int = 100_000, seed: int = 0, workers: int = 1, guard: float | None = DEFAULT_GUARD) -> TailEstimate:
    if method == "auto":
        if exact_admissible(spec, n):
            method = "exact"
        elif x > 1 and (guard is None or x <= guard * n ** (1 / 6)):
            method = "tilted-is"
        else:
            method = "crude"
    if method == "exact":
        return exact_tail(spec, q, x, n)
    if method == "tilted-is":
        return tilted_is(spec, q, x, n, budget, seed, workers=workers, guard=guard)
    if method == "crude":
        return crude_mc(spec, q, x, n, budget, seed, workers=workers)
    raise ValueError(f"unknown method {method!r}")


def _row(spec, q, x, n, method, budget, seed, workers, guard) -> RatioRow:
    est = estimate_tail(spec, q, x, n, method, budget, seed, workers, guard)
    ref = gaussian_ball_tail(q, x).value
    return RatioRow(n, float(x), est, ref, est.value / ref - 1.0, est.std_err / ref)


def ratio_scan(
    spec: DistributionSpec,
    q: QuadForm,
    x_grid: Sequence[float],
    n_grid: Sequence[int],
    method: str = "auto",
    budget: int = 100_000,
    seed: int = 0,
    workers: int = 1,
    pair: bool = False,
    guard: float | None = DEFAULT_GUARD,
) -> list[RatioRow]:
    """Relative error of the Gaussian approximation over an (n, x) grid.

    With ``pair=True`` each row also carries the mean of |ratio - 1| at n and
    n + 2, which damps the oscillation of lattice laws.
    """
    rows = []
    for n in sorted(set(int(v) for v in n_grid)):
        for x in sorted(set(float(v) for v in x_grid)):
            row = _row(spec, q, x, n, method, budget, seed, workers, guard)
            if pair:
                nxt = _row(spec, q, x, n + 2, method, budget, seed, workers, guard)
                pa = 0.5 * (abs(row.ratio_minus_1) + abs(nxt.ratio_minus_1))
                ps = 0.5 * math.hypot(row.ratio_se, nxt.ratio_se)
                row = RatioRow(row.n, row.x, row.p_hat, row.p_ref, row.ratio_minus_1, row.ratio_se, pa, ps)
            rows.append(row)
    return rows


@dataclass(frozen=True)
class RateFit:
    slope: float
    slope_se: float
    used_n: tuple[int, ...]
    excluded_n: tuple[int, ...]


def rate_fit(rows: Sequence[RatioRow], x: float | None = None) -> RateFit:
    """OLS slope of log|ratio - 1| against log n, keeping rows above 3 SE."""
    if x is not None:
        rows = [r for r in rows if abs(r.x - x) <= 1e-12 * max(1.0, abs(x))]
    used, excluded, ys = [], [], []
    for r in sorted(rows, key=lambda r: r.n):
        y = r.paired_abs if r.paired_abs is not None else abs(r.ratio_minus_1)
        se = r.paired_se if r.paired_se is not None else r.ratio_se
        if y > 0 and y >= 3.0 * se and r.n not in used:
            used.append(r.n)
            ys.append(math.log(y))
        else:
            excluded.append(r.n)
    if len(used) < 3:
        raise InsufficientSignalError("insufficient signal: fewer than 3 rows with |ratio - 1| >= 3 SE")
    lx = np.log(np.array(used, dtype=np.float64))
    ly = np.array(ys)
    xc = lx - lx.mean()
    slope = float(xc @ (ly - ly.mean()) / (xc @ xc))
    resid = ly - ly.mean() - slope * xc
    dof = len(used) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    return RateFit(slope, math.sqrt(s2 / float(xc @ xc)), tuple(used), tuple(excluded))
