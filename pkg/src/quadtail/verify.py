"""Invariant suite run by ``quadtail verify``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cramer, edgeworth, estimate, gaussref, model, tilt
from .streams import substream


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seed: int | None

    def as_dict(self) -> dict:
        return {
            "check": self.name,
            "status": "PASS" if self.passed else "FAIL",
            "measured": self.measured,
            "tolerance": self.tolerance,
            "seed": self.seed,
        }


Check = Callable[[int], tuple[float, float]]  # seed -> (measured, tolerance); pass iff measured <= tolerance


def _standardize_idempotent(seed):
    s = model.standardize(model.finite_support([[0, 0], [1, 0], [0, 2], [3, 1]], [0.1, 0.2, 0.3, 0.4]))
    t = model.standardize(s)
    return float(np.max(np.abs(s.points - t.points))), 1e-10


def _mgf_jensen(seed):
    spec = model.named_spec("skewed3:3")
    b = substream(seed, "jensen").standard_normal((200, 3))
    return float(np.max(-model.log_mgf(spec, b))), 0.0


def _moments_fd(seed):
    spec = model.standardize(model.finite_support([[0, 0], [1, 0], [0, 2], [3, 1]], [0.1, 0.2, 0.3, 0.4]))
    h = 1e-4
    cov = np.empty((2, 2))
    for j in range(2):
        for k in range(2):
            ej, ek = np.eye(2)[j] * h, np.eye(2)[k] * h
            cov[j, k] = (
                model.log_mgf(spec, ej + ek) - model.log_mgf(spec, ej - ek) - model.log_mgf(spec, ek - ej) + model.log_mgf(spec, -ej - ek)
            ) / (4 * h * h)
    return float(np.max(np.abs(cov - model.moments(spec).cov))), 1e-6


def _chi2_closed_form(seed):
    q = model.quad_form([1.0, 1.0])
    return max(abs(gaussref.gaussian_ball_tail(q, x).value - math.exp(-x * x / 2)) for x in (0.5, 1.0, 2.0, 3.0)), 1e-9


def _gauss_vs_mc(seed):
    q = model.quad_form([1.0, 0.5])
    n = 1_000_000
    z = substream(seed, "verify-gauss").standard_normal((n, 2))
    hits = np.count_nonzero(z[:, 0] ** 2 + 0.5 * z[:, 1] ** 2 > 2.25)
    p = hits / n
    se = math.sqrt(p * (1 - p) / n)
    return abs(p - gaussref.gaussian_ball_tail(q, 1.5).value) / se, 4.0


def _bound_ratio(seed):
    q = model.quad_form([1.0, 0.8, 0.6, 0.4, 0.2])
    xs = np.linspace(1.5, 4.0, 11)
    r = [gaussref.gaussian_ball_tail(q, x).value / gaussref.chisq_lower_bound(q, x).bound for x in xs]
    return max(r) / min(r), 1e3


def _sphere_monotone(seed):
    q = model.quad_form([1.0, 0.6, 0.3])
    a = np.linspace(0.5, 2.5, 200)
    xi = gaussref.sphere_fraction(q, a, samples=200_000, seed=seed)
    bad = float(max(0.0, -np.min(np.diff(xi))))
    ends = abs(xi[0]) + abs(xi[-1] - 1.0)
    return bad + ends, 0.0


def _radial_reduces(seed):
    q = model.identity_form(3)
    val = gaussref.weighted_radial_integral(q, 2.0, 0.0, 0.0, 100)
    ref = (2 * math.pi) ** 1.5 * gaussref.gaussian_ball_tail(q, 2.0).value
    return abs(val / ref - 1.0), 1e-6


def _omega_mass(seed):
    m = edgeworth.model_for_sum(model.named_spec("skewed3:2"), model.quad_form([1.0, 0.5]), 5)
    g = np.linspace(-12, 12, 481)
    yy = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    h = g[1] - g[0]
    return abs(float(np.sum(edgeworth.expansion_density(m, yy))) * h * h - 1.0), 1e-8


def _centre_zero(seed):
    m = edgeworth.model_for_sum(model.named_spec("skewed3:3"), model.quad_form([1.0, 0.7, 0.4]), 20)
    res = edgeworth.ball_mass_grid(m, np.zeros(3), [0.5, 1.0, 2.0], samples=100_000, seed=seed)
    return max(abs(r.correction) for r in res), 0.0


def _antisymmetry(seed):
    rng = substream(seed, "antisym")
    bad = 0
    for i in range(100):
        d = 1 + i % 4
        spec = model.named_spec(f"skewed3:{d}") if i % 2 else model.rademacher(d)
        ev = np.sort(rng.uniform(0.2, 1.0, d))[::-1]
        q = model.quad_form(ev / ev[0])
        params = tilt.make_params(2.0, 100, d)
        z = tilt.sample_zx(params, rng, 1)[0]
        bad += not tilt.lambda_antisymmetry_check(spec, q, params, z)
    return float(bad), 0.0


def _m_function(seed):
    p = tilt.make_params(2.5, 100, 3)
    a = np.linspace(0.0, 25.0, 400)
    lm = tilt.log_m_function(p, a)
    return abs(float(lm[0])) + float(max(0.0, -np.min(np.diff(lm)))), 1e-12


def _tilted_normalized(seed):
    spec = model.named_spec("skewed3:3")
    q = model.quad_form([1.0, 0.7, 0.4])
    params = tilt.make_params(3.0, 200, 3)
    law = tilt.tilted_law(spec, q, params, np.array([4.0, -2.0, 1.0]))
    return abs(float(law.probs.sum()) - 1.0), 1e-12


def _tilted_vs_exact(seed):
    est = estimate.tilted_is(model.rademacher(1), model.identity_form(1), 2.0, 100, 20_000, seed)
    return abs(est.value - estimate.exact_binomial(2.0, 100).value) / est.std_err, 4.0


def _crude_vs_exact(seed):
    est = estimate.crude_mc(model.rademacher(1), model.identity_form(1), 2.0, 100, 200_000, seed)
    return abs(est.value - estimate.exact_binomial(2.0, 100).value) / est.std_err, 4.0


def _determinism(seed):
    args = (model.named_spec("skewed3:2"), model.quad_form([1.0, 0.5]), 2.5, 50, 5_000, seed)
    a, b = estimate.tilted_is(*args), estimate.tilted_is(*args, workers=2)
    return float(a != b), 0.0


def _lattice_vs_binomial(seed):
    a = estimate.exact_lattice(model.rademacher(1), model.identity_form(1), 2.0, 64).value
    b = estimate.exact_binomial(2.0, 64).value
    return abs(a - b) / b, 1e-12


def _q3_mean(seed):
    return abs(cramer.sphere_q3_average(cramer.CubicForm.from_spec(model.named_spec("skewed3:3")), seed=seed)), 0.0


def _sphere_exp_jensen(seed):
    res = cramer.sphere_exp_integral(cramer.CubicForm.from_spec(model.named_spec("skewed3:3")), 1.5, pairs=100_000, seed=seed)
    return max(0.0, 1.0 - res.value) / max(res.std_err, 1e-300), 4.0


CHECKS: dict[str, Check] = {
    "standardize_idempotent": _standardize_idempotent,
    "mgf_jensen": _mgf_jensen,
    "moments_finite_difference": _moments_fd,
    "chi2_two_dof_closed_form": _chi2_closed_form,
    "gaussian_tail_vs_mc": _gauss_vs_mc,
    "lower_bound_ratio_spread": _bound_ratio,
    "sphere_fraction_monotone": _sphere_monotone,
    "radial_integral_reduction": _radial_reduces,
    "expansion_total_mass": _omega_mass,
    "correction_zero_at_centre": _centre_zero,
    "lambda_antisymmetry": _antisymmetry,
    "m_normalized_and_monotone": _m_function,
    "tilted_law_normalized": _tilted_normalized,
    "tilted_is_vs_exact": _tilted_vs_exact,
    "crude_vs_exact": _crude_vs_exact,
    "estimator_determinism": _determinism,
    "lattice_vs_binomial": _lattice_vs_binomial,
    "q3_antithetic_mean": _q3_mean,
    "sphere_exp_jensen": _sphere_exp_jensen,
}


def run_suite(seed: int = 0, inject_failure: str | None = None, only: list[str] | None = None) -> list[CheckResult]:
    """Run every check; ``inject_failure`` names a check whose tolerance is forced below zero."""
    out = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        measured, tol = fn(seed)
        if name == inject_failure:
            tol = -1.0
        out.append(CheckResult(name, bool(measured <= tol), float(measured), float(tol), seed))
    return out
