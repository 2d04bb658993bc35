import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadtail import estimate, model
from quadtail.gaussref import gaussian_ball_tail

# Exhaustive enumeration of the standardized two-point law, p = 1/5, n = 10, x = 1.2
# (tests/oracles.py).
TWO_POINT_ENUM = 0.228248064


def _row(n, r, se=0.0):
    est = estimate.TailEstimate(1.0, 0.0, 0, "synthetic", None, 0.0)
    return estimate.RatioRow(n, 2.0, est, 1.0, r, se)


def test_binomial_enumeration_example():
    assert estimate.exact_binomial(1.5, 4).value == 0.125
    assert estimate.exact_binomial(0.5, 1).value == 1.0


def test_two_point_against_enumeration():
    assert estimate.exact_two_point(0.2, 1.2, 10).value == pytest.approx(TWO_POINT_ENUM, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 14), st.floats(0.1, 3.0))
def test_binomial_matches_brute_force(n, x):
    hits = sum(1 for s in itertools.product((-1, 1), repeat=n) if abs(sum(s)) > x * math.sqrt(n))
    assert estimate.exact_binomial(x, n).value == pytest.approx(hits / 2**n, abs=1e-15)


def test_lattice_single_summand_direct():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    fin = spec.expand()
    ref = float(fin.probs @ (np.sum(q.eigenvalues * fin.points**2, axis=1) > 1.2**2))
    est = estimate.exact_lattice(spec, q, 1.2, 1)
    assert est.value == pytest.approx(ref, abs=1e-15)


def test_lattice_conserves_mass():
    est = estimate.exact_lattice(model.named_spec("skewed3:2"), model.quad_form([1.0, 0.5]), 2.5, 30)
    assert abs(est.diagnostics["mass_defect"]) <= 1e-12


def test_lattice_agrees_with_binomial_routes():
    for n in (8, 33, 64):
        a = estimate.exact_lattice(model.rademacher(1), model.identity_form(1), 2.0, n).value
        assert a == pytest.approx(estimate.exact_binomial(2.0, n).value, rel=1e-12)
    a = estimate.exact_lattice(model.two_point(0.2), model.identity_form(1), 2.0, 50).value
    assert a == pytest.approx(estimate.exact_two_point(0.2, 2.0, 50).value, rel=1e-12)


def test_lattice_two_dims_against_tilted():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    exact = estimate.exact_lattice(spec, q, 2.5, 30).value
    est = estimate.tilted_is(spec, q, 2.5, 30, 100_000, seed=6)
    assert abs(est.value - exact) < 4 * est.std_err


def test_lattice_grid_guard():
    with pytest.raises(estimate.GridTooLargeError):
        estimate.exact_lattice(model.named_spec("skewed3:2"), model.identity_form(2), 2.0, 2000)
    with pytest.raises(ValueError):
        estimate.exact_lattice(model.named_spec("skewed3:3"), model.identity_form(3), 2.0, 10)


def test_crude_at_zero_radius():
    est = estimate.crude_mc(model.gaussian(2), model.identity_form(2), 0.0, 5, 1000, seed=1)
    assert est.value == 1.0 and est.std_err == 0.0
    lat = estimate.crude_mc(model.rademacher(1), model.identity_form(1), 0.0, 6, 10_000, seed=1)
    assert lat.value >= 1 - math.comb(6, 3) / 64 - 4 * math.sqrt(0.3 * 0.7 / 10_000)


def test_crude_gaussian_law():
    q = model.quad_form([1.0, 0.5])
    est = estimate.crude_mc(model.gaussian(2), q, 1.5, 10, 100_000, seed=1)
    assert abs(est.value - gaussian_ball_tail(q, 1.5).value) < 4 * est.std_err


def test_tilted_gaussian_law():
    q = model.identity_form(2)
    est = estimate.tilted_is(model.gaussian(2), q, 2.0, 100, 20_000, seed=1)
    assert abs(est.value - math.exp(-2.0)) < 4 * est.std_err


def test_crude_matches_binomial():
    est = estimate.crude_mc(model.rademacher(1), model.identity_form(1), 2.0, 100, 500_000, seed=2)
    assert abs(est.value - estimate.exact_binomial(2.0, 100).value) < 4 * est.std_err


def test_estimates_are_deterministic():
    args = (model.named_spec("skewed3:2"), model.quad_form([1.0, 0.5]), 2.5, 50, 5_000, 3)
    assert estimate.tilted_is(*args) == estimate.tilted_is(*args)
    assert estimate.tilted_is(*args) == estimate.tilted_is(*args, workers=3)
    assert estimate.crude_mc(*args) == estimate.crude_mc(*args, workers=2)


def test_estimate_contract():
    ex = estimate.exact_binomial(2.0, 100)
    mc = estimate.crude_mc(model.rademacher(1), model.identity_form(1), 2.0, 100, 1000, seed=1)
    assert ex.std_err == 0 and 0 <= ex.value <= 1
    assert mc.std_err > 0 and 0 <= mc.value <= 1
    assert set(ex.as_dict()) >= {"value", "std_err", "method"}


@pytest.mark.slow
def test_tilted_is_unbiased_over_seeds():
    spec = model.rademacher(1)
    q = model.identity_form(1)
    exact = estimate.exact_binomial(2.0, 100).value
    vals = np.array([estimate.tilted_is(spec, q, 2.0, 100, 2_000, seed=s, pool_size=2_000, n_blocks=8).value for s in range(100)])
    assert abs(vals.mean() - exact) < 4 * vals.std(ddof=1) / 10


def test_tilted_rejects_small_x():
    from quadtail.tilt import TiltUndefinedError

    with pytest.raises(TiltUndefinedError):
        estimate.tilted_is(model.rademacher(1), model.identity_form(1), 0.8, 100, 1000, seed=0)


def test_ratio_scan_gaussian_law():
    rows = estimate.ratio_scan(model.gaussian(1), model.identity_form(1), [1.5, 2.5], [20, 10], method="crude", budget=50_000, seed=2)
    assert [(r.n, r.x) for r in rows] == [(10, 1.5), (10, 2.5), (20, 1.5), (20, 2.5)]
    assert all(abs(r.ratio_minus_1) < 4 * r.ratio_se for r in rows)


def test_ratio_scan_rademacher_paired_decreasing():
    rows = estimate.ratio_scan(model.rademacher(1), model.identity_form(1), [2.0], [64, 256, 1024, 4096], pair=True)
    vals = [r.paired_abs for r in rows]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_rate_fit_exact_power_laws():
    rows = [_row(n, 3.0 / n) for n in (64, 128, 256, 512)]
    assert estimate.rate_fit(rows).slope == pytest.approx(-1.0, abs=1e-12)
    rows = [_row(n, -0.7 / math.sqrt(n)) for n in (64, 128, 256, 512)]
    assert estimate.rate_fit(rows).slope == pytest.approx(-0.5, abs=1e-12)


def test_rate_fit_drops_noise_rows():
    rows = [_row(n, 1.0 / n, se=0.0) for n in (10, 20, 40)] + [_row(80, 1e-3, se=1e-3)]
    fit = estimate.rate_fit(rows)
    assert fit.used_n == (10, 20, 40) and fit.excluded_n == (80,)
    with pytest.raises(estimate.InsufficientSignalError, match="insufficient signal"):
        estimate.rate_fit(rows[2:])


def test_exact_admissibility():
    assert estimate.exact_admissible(model.rademacher(1), 10**6)
    assert not estimate.exact_admissible(model.named_spec("symmetric4"), 1000)
    assert not estimate.exact_admissible(model.named_spec("skewed3:3"), 10)
    # W is exactly Gaussian, so the reference tail is the exact answer
    assert estimate.exact_admissible(model.gaussian(1), 10)
    assert estimate.exact_tail(model.gaussian(1), model.identity_form(1), 1.959963984540054, 10).value == pytest.approx(0.05)


def test_exact_binomial_big_n_float_route():
    # beyond the exact-integer range, scipy's binomial tail is used
    v = estimate.exact_binomial(2.0, 10**6).value
    assert v == pytest.approx(0.0455, rel=0.01)
    assert Fraction(1, 2) == Fraction(estimate.exact_binomial(1e-9, 2).value).limit_denominator(10)
