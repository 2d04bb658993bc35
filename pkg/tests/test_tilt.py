import math

import numpy as np
import pytest
from scipy import integrate, special

from quadtail import model, tilt
from quadtail.streams import substream

# Frozen values from tests/oracles.py.
KAPPA_D1_X2 = 1.0000000019731754  # 1 / erf(6 / sqrt 2)
M_D2_X2_A15 = 2.325063011300879  # nested quadrature
M_D2_MC = (2.3251451478438154, 0.0015537256588476058)  # 1e7 truncated-normal draws
EZ2_D3_X105 = 2.821899989875829  # 3 P(chi2_5 <= z0^2) / P(chi2_3 <= z0^2)


def _m_quad(d, x, a):
    h = 0.5 - 0.5 / (x * x)
    z0 = 3 * x
    c = math.sqrt(2 * h) * a

    def inner(z1):
        rest = special.gammainc((d - 1) / 2, (z0 * z0 - z1 * z1) / 2) if d > 1 else 1.0
        return math.exp(c * z1 - z1 * z1 / 2) / math.sqrt(2 * math.pi) * rest

    # kappa E[exp(c Z_1); |Z| <= z0]; the factor exp(h a^2) cancels the shift
    val, _ = integrate.quad(inner, -z0, z0, epsabs=0, epsrel=1e-13, limit=200)
    return val / special.gammainc(d / 2, z0 * z0 / 2)


def test_params():
    p = tilt.make_params(2.0, 100, 1)
    assert p.h == 0.375 and p.z0 == 6.0
    assert p.kappa == pytest.approx(KAPPA_D1_X2, rel=1e-15)
    assert p.scale == pytest.approx(math.sqrt(0.75))


def test_params_reject_small_x_and_strong_deviation():
    with pytest.raises(tilt.TiltUndefinedError):
        tilt.make_params(1.0, 100, 1)
    with pytest.raises(tilt.OutsideRegimeError):
        tilt.make_params(5.0, 100, 1)
    assert tilt.make_params(5.0, 100, 1, guard=None).x == 5.0


def test_m_against_frozen_quadrature():
    p = tilt.make_params(2.0, 100, 2)
    assert tilt.m_function(p, 1.5) == pytest.approx(M_D2_X2_A15, rel=1e-11)
    assert abs(M_D2_X2_A15 - M_D2_MC[0]) < 4 * M_D2_MC[1]


@pytest.mark.parametrize("d,x,a", [(1, 1.5, 0.7), (3, 2.0, 2.5), (4, 1.8, 5.0)])
def test_m_against_quadrature(d, x, a):
    p = tilt.make_params(x, 1000, d)
    m = tilt.m_function(p, a)
    assert m == pytest.approx(_m_quad(d, x, a), rel=1e-10)


def test_m_normalized_increasing_and_finite_far_out():
    p = tilt.make_params(2.0, 100, 3)
    a = np.linspace(0, 35, 300)
    lm = tilt.log_m_function(p, a)
    assert lm[0] == pytest.approx(0.0, abs=1e-13)
    assert np.all(np.diff(lm) > 0)
    assert np.all(np.isfinite(lm))


def test_m_table_interpolation():
    p = tilt.make_params(2.5, 200, 2)
    t = tilt.m_table(p)
    a = np.array([2.6, 7.3, 19.9])
    approx = np.interp(a, t.a0 + t.da * np.arange(t.log_m.size), t.log_m)
    np.testing.assert_allclose(approx, tilt.log_m_function(p, a), atol=1e-4)
    assert tilt.m_table(p) is t


def test_truncated_normal_second_moment():
    z = tilt.sample_ball_normal(3, 3.15, substream(5, "zx"), 1_000_000)
    assert np.all(np.einsum("ij,ij->i", z, z) <= 3.15**2)
    s = np.einsum("ij,ij->i", z, z)
    assert abs(s.mean() - EZ2_D3_X105) < 4 * s.std() / 1000


def test_rademacher_tilted_mean_is_tanh():
    p = tilt.make_params(2.0, 50, 1)
    q = model.identity_form(1)
    z = np.array([1.3])
    law = tilt.tilted_law(model.rademacher(1), q, p, z)
    theta = p.scale * 1.3 / math.sqrt(50)
    assert law.mu_tilde[0] == pytest.approx(math.tanh(theta), rel=1e-14)
    assert law.sigma_tilde[0, 0] == pytest.approx(1 - math.tanh(theta) ** 2, rel=1e-13)


def test_tilted_law_normalized_and_rejects_outside_ball():
    p = tilt.make_params(3.0, 200, 3)
    q = model.quad_form([1.0, 0.7, 0.4])
    law = tilt.tilted_law(model.named_spec("skewed3:3"), q, p, np.array([4.0, -2.0, 1.0]))
    assert law.probs.sum() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        tilt.tilted_law(model.named_spec("skewed3:3"), q, p, np.array([10.0, 0, 0]))


def test_gaussian_tilted_law_is_shift():
    p = tilt.make_params(2.0, 100, 2)
    q = model.quad_form([1.0, 0.5])
    z = np.array([1.0, -2.0])
    law = tilt.tilted_law(model.gaussian(2), q, p, z)
    np.testing.assert_allclose(law.mu_tilde, p.scale * q.eigenvalues * z / 10)


def test_lambda_antisymmetry():
    rng = substream(3, "anti")
    for d in (1, 2, 3, 4):
        ev = rng.uniform(0.2, 1.0, d)
        q = model.quad_form(ev / ev.max())
        p = tilt.make_params(2.0, 100, d)
        z = tilt.sample_zx(p, rng, 1)[0]
        assert tilt.lambda_antisymmetry_check(model.named_spec(f"skewed3:{d}"), q, p, z)


def test_moment_expansion_remainders_shrink():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.6])
    z = np.array([1.2, -0.7])
    mu, sig = [], []
    for n in (100, 10_000, 1_000_000):
        e = tilt.tilted_moment_expansion(spec, q, tilt.make_params(2.0, n, 2), z)
        mu.append(e.mu_remainder)
        sig.append(e.sigma_remainder)
    assert mu[0] > mu[1] > mu[2]
    assert np.polyfit(np.log([1e2, 1e4, 1e6]), np.log(sig), 1)[0] < -0.8


def test_b_terms_against_definitions():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    p = tilt.make_params(2.0, 64, 2)
    z = np.array([0.8, -1.4])
    y = np.array([0.3, 0.9])
    b = tilt.b_terms(spec, q, p, z, y)
    fin = spec.expand()
    s = p.scale * q.sqrt * z
    lin = fin.points @ s
    assert b.b3 == pytest.approx(float(fin.probs @ lin**3) / 48, rel=1e-12)
    lam = np.linalg.eigvalsh(tilt.first_order_matrix(spec, q, p, z))
    assert b.b0 == pytest.approx(-lam.sum() / 16, rel=1e-12)
    assert tilt.b_terms(model.gaussian(2), q, p, z, y) == tilt.BTerms(0.0, 0.0, 0.0, 0.0)


def test_mixture_weight_is_power_of_mgf():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    p = tilt.make_params(2.0, 81, 2)
    z = np.array([1.0, 2.0])
    theta = p.scale * q.sqrt * z / 9
    assert tilt.mixture_weight(spec, q, p, z) == pytest.approx(model.mgf(spec, theta) ** 81, rel=1e-12)


@pytest.mark.parametrize("a", [[0.5], [1.0, -0.5], [2.0, 0.3, -1.0]])
def test_mgf_expansion_within_error_shape(a):
    spec = model.named_spec(f"skewed3:{len(a)}")
    c = tilt.mgf_expansion_check(spec, a, 2500)
    assert abs(c.lhs - c.rhs_main) <= c.envelope


def test_mgf_expansion_guard():
    with pytest.raises(tilt.OutsideRegimeError):
        tilt.mgf_expansion_check(model.named_spec("skewed3:1"), [5.0], 100)


@pytest.mark.parametrize("proposal", ["zx", "matched", "adaptive"])
def test_pool_mean_weight_gaussian_closed_form(proposal):
    # E_{Z_x} exp(h Z^2) = kappa x P(|Z| <= 3) for a Gaussian summand in one dimension
    p = tilt.make_params(2.0, 100, 1)
    z, lw = tilt.sample_pool(model.gaussian(1), model.identity_form(1), p, substream(1, "pool"), 200_000, proposal=proposal)
    w = np.exp(lw)
    ref = p.kappa * 2.0 * math.erf(3 / math.sqrt(2))
    assert abs(w.mean() - ref) < 5 * w.std() / math.sqrt(w.size)


def test_pool_weights_zero_outside_ball():
    p = tilt.make_params(1.2, 100, 2)
    z, lw = tilt.sample_pool(model.named_spec("skewed3:2"), model.quad_form([1.0, 0.5]), p, substream(2, "pool"), 50_000, proposal="matched")
    outside = np.einsum("ij,ij->i", z, z) > p.z0**2
    assert np.all(np.isneginf(lw[outside]))
    assert np.all(np.isfinite(lw[~outside]))


def test_tilted_sums_mean():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    p = tilt.make_params(2.0, 100, 2)
    z = np.tile([1.0, -0.5], (100_000, 1))
    s = tilt.sample_tilted_sums(spec, q, p, z, substream(3, "ts"))
    law = tilt.tilted_law(spec, q, p, z[0])
    np.testing.assert_allclose(s.mean(axis=0), 10 * law.mu_tilde, atol=4 * 1 / math.sqrt(100_000))


def test_h_and_kappa_limits():
    assert tilt.make_params(1.0 + 1e-9, 100, 2).h == pytest.approx(0.0, abs=1e-8)
    for x in (1.2, 2.0, 5.0):
        p = tilt.make_params(x, 10**9, 3)
        assert 0 < p.h < 0.5 and p.kappa >= 1
    assert tilt.make_params(10.0, 10**12, 3).kappa == 1.0


def test_truncated_normal_support_and_symmetry():
    p = tilt.make_params(1.05, 100, 3)
    z = tilt.sample_zx(p, substream(8, "zx"), 1_000_000)
    assert np.all(np.linalg.norm(z, axis=1) <= p.z0)
    assert np.all(np.abs(z.mean(axis=0)) < 4 * z.std(axis=0) / 1000)
    assert np.mean(np.einsum("ij,ij->i", z, z)) <= 3


def test_gaussian_tilt_is_exact():
    p = tilt.make_params(2.0, 100, 2)
    q = model.identity_form(2)
    z = np.array([1.0, 2.0])
    law = tilt.tilted_law(model.gaussian(2), q, p, z)
    np.testing.assert_array_equal(law.mu_tilde, p.scale * z / 10)
    np.testing.assert_array_equal(law.sigma_tilde, np.eye(2))
    assert not np.any(tilt.first_order_matrix(model.gaussian(2), q, p, z))
    e = tilt.tilted_moment_expansion(model.gaussian(2), model.quad_form([1.0, 0.5]), p, z)
    assert e.mu_remainder < 1e-15 and e.sigma_remainder < 1e-15


def test_no_tilt_at_origin():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    p = tilt.make_params(2.0, 100, 2)
    law = tilt.tilted_law(spec, q, p, np.zeros(2))
    np.testing.assert_allclose(law.mu_tilde, 0.0, atol=1e-15)
    np.testing.assert_allclose(law.sigma_tilde, np.diag(q.eigenvalues), atol=1e-15)
    e = tilt.tilted_moment_expansion(spec, q, p, np.zeros(2))
    assert not np.any(e.mu_approx) and e.mu_remainder < 1e-15 and e.sigma_remainder < 1e-15
    assert tilt.lambda_antisymmetry_check(spec, q, p, np.zeros(2))
    assert tilt.mixture_weight(spec, q, p, np.zeros(2)) == 1.0


def test_rademacher_antisymmetry_property():
    rng = substream(12, "rad")
    p = tilt.make_params(2.0, 100, 3)
    q = model.quad_form([1.0, 0.6, 0.3])
    for z in tilt.sample_zx(p, rng, 100):
        assert tilt.lambda_antisymmetry_check(model.rademacher(3), q, p, z)


def test_b_terms_at_origin():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    p = tilt.make_params(2.0, 64, 2)
    y = np.array([0.4, -0.6])
    b = tilt.b_terms(spec, q, p, np.zeros(2), y)
    assert b.b0 == 0 and b.b1 == 0 and b.b3 == 0
    fin = spec.expand()
    lin = fin.points @ (y / q.sqrt)
    sq = np.sum(fin.points**2, axis=1)
    assert b.b2 == pytest.approx(float(fin.probs @ (3 * sq * lin - lin**3)) / 48, rel=1e-12)
    assert tilt.b_terms(spec, q, p, np.zeros(2), np.zeros(2)) == tilt.BTerms(0.0, 0.0, 0.0, 0.0)


def test_b_term_magnitudes_scale():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    consts0, consts3 = [], []
    for x, n in ((1.5, 100), (2.0, 1000), (3.0, 10_000)):
        p = tilt.make_params(x, n, 2)
        rng = substream(5, "bt", n)
        c0 = c3 = 0.0
        for z in tilt.sample_zx(p, rng, 200):
            b = tilt.b_terms(spec, q, p, z, rng.standard_normal(2))
            c0 = max(c0, abs(b.b0) / (x / math.sqrt(n)))
            c3 = max(c3, abs(b.b3) / (x**3 / math.sqrt(n)))
        consts0.append(c0)
        consts3.append(c3)
    assert max(consts0) / min(consts0) < 3
    assert max(consts3) / min(consts3) < 3


def test_mgf_expansion_trivial_cases():
    c = tilt.mgf_expansion_check(model.rademacher(2), [0.0, 0.0], 100)
    assert c.lhs == c.rhs_main == 1.0 and c.envelope == 0.0
    g = tilt.mgf_expansion_check(model.gaussian(2), [1.0, 1.0], 10_000)
    assert g.lhs == pytest.approx(math.e, rel=1e-14)
    assert g.lhs == pytest.approx(g.rhs_main, rel=1e-14)


def test_mgf_expansion_constant_stable():
    out = {}
    for n in (100, 10_000):
        r = []
        for t in np.linspace(0.5, 5, 10):
            for ang in (0.3, 1.1):
                a = t * np.array([math.cos(ang), math.sin(ang)])
                c = tilt.mgf_expansion_check(model.rademacher(2), a, n, max_ratio=0.5)
                r.append(abs(c.lhs - c.rhs_main) / c.envelope)
        out[n] = max(r)
    assert all(v < 1 for v in out.values())
    assert 0.2 < out[100] / out[10_000] < 5


def test_gaussian_mixture_weight():
    p = tilt.make_params(2.0, 100, 2)
    q = model.quad_form([1.0, 0.5])
    z = np.array([1.0, 2.0])
    assert tilt.mixture_weight(model.gaussian(2), q, p, z) == pytest.approx(math.exp(p.h * 3.0), rel=1e-14)


def test_mixture_weight_envelope():
    spec = model.named_spec("skewed3:2")
    q = model.quad_form([1.0, 0.5])
    consts = []
    zs = tilt.sample_zx(tilt.make_params(2.0, 100, 2), substream(0, "env"), 200)
    for n in (100, 1000, 10_000):
        p = tilt.make_params(2.0, n, 2)
        worst = 0.0
        for z in zs:
            w = tilt.mixture_weight(spec, q, p, z)
            b3 = tilt.b_terms(spec, q, p, z, np.zeros(2)).b3
            lead = math.exp(p.h * float(np.sum(q.eigenvalues * z * z)))
            worst = max(worst, abs(w / lead / (1 + b3) - 1) / (2.0**6 / n))
        consts.append(worst)
    assert max(consts) < 1 and max(consts) / min(consts) < 3
