"""The cubic term of the Cramer series and the n^{1/6}-scale limit.

At ``x = c n^{1/6}`` the leading correction ``exp(n (x / sqrt n)^3 Q3(u))``
no longer vanishes: averaged over directions it tends to a constant above 1
whenever some mixed third moment of ``X_1`` is nonzero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimate import exact_admissible, exact_tail, tilted_is
from .gaussref import gaussian_ball_tail
from .model import DistributionSpec, identity_form, moments
from .streams import block_sizes, substream

VONBAHR_GUARD = 0.3


class RegimeError(ValueError):
    pass


@dataclass(frozen=True)
class CubicForm:
    coefficients: np.ndarray  # E[X_j X_k X_l] / 6

    @classmethod
    def from_spec(cls, spec: DistributionSpec) -> "CubicForm":
        c = moments(spec).third_tensor / 6.0
        c.setflags(write=False)
        return cls(c)

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coefficients)


def q3_eval(form: CubicForm, u) -> np.ndarray | float:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        return float(np.einsum("ijk,i,j,k->", form.coefficients, u, u, u))
    return np.einsum("ijk,ni,nj,nk->n", form.coefficients, u, u, u, optimize=True)


@dataclass(frozen=True)
class SphereAverage:
    value: float
    std_err: float


def _directions(d: int, count: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((count, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sphere_q3_average(form: CubicForm, pairs: int = 100_000, seed: int = 0) -> float:
    """Antithetic estimate of the spherical mean of Q3; the pairs cancel exactly."""
    u = _directions(form.dim, pairs, substream(seed, "q3_mean"))
    return float(np.sum(q3_eval(form, u) + q3_eval(form, -u)) / (2 * pairs))


def sphere_exp_integral(form: CubicForm, c: float, pairs: int = 1_000_000, seed: int = 0, method: str = "auto", n_blocks: int = 16) -> SphereAverage:
    """Normalized spherical average of exp(c^3 Q3(u)).

    The unit sphere of the line is {-1, +1}, so ``d = 1`` is exactly
    ``cosh(c^3 Q3(1))``.  Otherwise directions come in pairs ``(u, -u)``,
    each pair contributing ``cosh(c^3 Q3(u))``.
    """
    c3 = float(c) ** 3
    if form.is_zero or c3 == 0.0:
        return SphereAverage(1.0, 0.0)
    if method == "auto":
        method = "exact" if form.dim == 1 else "mc"
    if method == "exact":
        if form.dim != 1:
            raise ValueError("closed form only in one dimension")
        return SphereAverage(math.cosh(c3 * float(form.coefficients[0, 0, 0])), 0.0)
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    total = 0.0
    total_sq = 0.0
    for b, size in enumerate(block_sizes(pairs, n_blocks)):
        u = _directions(form.dim, size, substream(seed, "sphere_exp", b))
        v = np.cosh(c3 * q3_eval(form, u))
        total += float(v.sum())
        total_sq += float(v @ v)
    mean = total / pairs
    var = max(total_sq / pairs - mean * mean, 0.0) * pairs / max(pairs - 1, 1)
    return SphereAverage(mean, math.sqrt(var / pairs))


def vonbahr_ratio(spec: DistributionSpec, x: float, n: int, guard: float | None = VONBAHR_GUARD, pairs: int = 1_000_000, seed: int = 0) -> SphereAverage:
    """Leading-order prediction of P(|W| > x) / P(|Z| > x).

    This is the spherical average of exp((x^3 / sqrt n) Q3(u)); the factors
    1 + O(x / sqrt n + x^4 / n) are not included.
    """
    if x <= 1:
        raise RegimeError("prediction needs x > 1")
    if guard is not None and x > guard * n**0.25:
        raise RegimeError(f"x = {x} exceeds {guard} * n^(1/4) = {guard * n ** 0.25:.4g}")
    c = x / n ** (1.0 / 6.0)
    return sphere_exp_integral(CubicForm.from_spec(spec), c, pairs=pairs, seed=seed)


@dataclass(frozen=True)
class DemoRow:
    n: int
    x_n: float
    exact_ratio: float
    ratio_se: float
    predicted_factor: float
    predicted_se: float
    gap: float
    method: str


def nonconvergence_demo(
    spec: DistributionSpec,
    c: float,
    n_grid: Sequence[int],
    pairs: int = 1_000_000,
    seed: int = 0,
    samples: int = 200_000,
    workers: int = 1,
) -> list[DemoRow]:
    """Ratio P(|W| > x_n) / P(|Z| > x_n) along ``x_n = c n^{1/6}``.

    Exact oracles are used when admissible, otherwise the tilted sampler.
    The predicted limit is the spherical average of exp(c^3 Q3(u)).
    """
    form = CubicForm.from_spec(spec)
    pred = sphere_exp_integral(form, c, pairs=pairs, seed=seed)
    q = identity_form(spec.dim)
    rows = []
    for n in sorted(set(int(v) for v in n_grid)):
        x = c * n ** (1.0 / 6.0)
        if exact_admissible(spec, n):
            est = exact_tail(spec, q, x, n)
        else:
            est = tilted_is(spec, q, x, n, samples, seed, workers=workers)
        ref = gaussian_ball_tail(q, x).value
        if ref <= 0.0:
            raise FloatingPointError(f"Gaussian reference tail underflows at n = {n} (x = {x:.4g})")
        ratio = est.value / ref
        rows.append(DemoRow(n, x, ratio, est.std_err / ref, pred.value, pred.std_err, ratio - pred.value, est.method))
    return rows
