"""Gaussian-mixed exponential tilting.

For ``x > 1`` put ``h = 1/2 - 1/(2 x^2)`` and ``z0 = 3 x``.  ``Z_x`` is a
standard normal vector conditioned on ``|Z_x| <= z0`` (normalizer
``kappa``).  Given ``Z_x = z`` the summand ``D X_1`` is tilted by
``exp(<sqrt(2h) z, y> / sqrt(n))``; mixing these tilted sums over ``Z_x``
with weights ``G^n(sqrt(2h) D z / sqrt(n))`` (``G`` the MGF of ``X_1``)
reproduces the globally tilted law of ``D W``, and the radial function

    m(a) = E exp(<sqrt(2h) Z_x, y>)  for |y| = a
         = kappa exp(h a^2) P(|Z + sqrt(2h) a e_1| <= z0)

undoes the tilt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .model import DistributionSpec, QuadForm, log_mgf, moments

DEFAULT_GUARD = 2.0


class TiltUndefinedError(ValueError):
    pass


class OutsideRegimeError(ValueError):
    pass


@dataclass(frozen=True)
class TiltParams:
    x: float
    n: int
    dim: int
    h: float
    z0: float
    kappa: float

    @property
    def scale(self) -> float:
        """sqrt(2h)."""
        return math.sqrt(2.0 * self.h)


def make_params(x: float, n: int, d: int, guard: float | None = DEFAULT_GUARD) -> TiltParams:
    """Tilt parameters; ``guard`` caps ``x <= guard * n^{1/6}`` (``None`` disables)."""
    if x <= 1:
        raise TiltUndefinedError("tilt undefined for x <= 1; use crude estimator")
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if guard is not None and x > guard * n ** (1.0 / 6.0):
        raise OutsideRegimeError(
            f"outside moderate-deviation regime: x={x} > {guard} * n^(1/6) = {guard * n ** (1 / 6):.4g}"
        )
    h = 0.5 - 0.5 / (x * x)
    z0 = 3.0 * x
    kappa = 1.0 / special.gammainc(0.5 * d, 0.5 * z0 * z0)
    return TiltParams(float(x), int(n), int(d), h, z0, float(kappa))


def sample_zx(params: TiltParams, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draws of Z_x, the standard normal conditioned on the ball of radius z0."""
    return sample_ball_normal(params.dim, params.z0, rng, count)


def sample_ball_normal(d: int, z0: float, rng: np.random.Generator, count: int) -> np.ndarray:
    """Standard d-normal conditioned on ``|z| <= z0``.

    Rejection from the unconditioned normal when at least half the draws are
    accepted; otherwise the squared radius comes from an inverse truncated
    chi-square CDF and the direction is uniform.
    """
    accept = float(special.gammainc(0.5 * d, 0.5 * z0 * z0))
    if accept >= 0.5:
        out = np.empty((count, d))
        filled = 0
        while filled < count:
            need = count - filled
            z = rng.standard_normal((int(need / accept) + 16, d))
            z = z[np.einsum("ij,ij->i", z, z) <= z0 * z0][:need]
            out[filled : filled + z.shape[0]] = z
            filled += z.shape[0]
        return out
    u = rng.random(count)
    r2 = 2.0 * special.gammaincinv(0.5 * d, u * accept)
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * np.sqrt(r2)[:, None]


# ---------------------------------------------------------------------------
# radial weight m(a)


def _log_ball_prob_shifted(params: TiltParams, c: np.ndarray, panels: int = 400, order: int = 16) -> np.ndarray:
    """log P(|Z + c e_1| <= z0) for an array of shifts ``c >= 0``."""
    d, z0 = params.dim, params.z0
    c = np.asarray(c, dtype=np.float64)
    if d == 1:
        hi = special.log_ndtr(z0 - c)
        lo = special.log_ndtr(-z0 - c)
        return hi + np.log1p(-np.exp(lo - hi))
    # z_1 = z0 cos t; the remaining coordinates form a chi variable with d - 1 dof
    gx, gw = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, math.pi, panels + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    t = (0.5 * (hi - lo) * gx + 0.5 * (hi + lo)).ravel()
    w = (0.5 * (hi - lo) * gw).ravel()
    sin_t = np.sin(t)
    log_f = np.log(special.gammainc(0.5 * (d - 1), 0.5 * (z0 * sin_t) ** 2))
    base = log_f + np.log(w * z0 * sin_t) - 0.5 * math.log(2 * math.pi)
    z1 = z0 * np.cos(t)
    out = np.empty_like(c)
    flat = c.ravel()
    res = out.ravel()
    for start in range(0, flat.size, 256):
        cc = flat[start : start + 256, None]
        res[start : start + 256] = special.logsumexp(base[None, :] - 0.5 * (z1[None, :] - cc) ** 2, axis=1)
    return res.reshape(c.shape)


def log_m_function(params: TiltParams, a) -> np.ndarray | float:
    """log m(a) with m(a) = kappa exp(h a^2) P(|Z + sqrt(2h) a e_1| <= z0)."""
    scalar = np.ndim(a) == 0
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if np.any(a < 0):
        raise ValueError("a must be nonnegative")
    out = math.log(params.kappa) + params.h * a * a + _log_ball_prob_shifted(params, params.scale * a)
    return float(out[0]) if scalar else out


def m_function(params: TiltParams, a):
    return np.exp(log_m_function(params, a))


@dataclass(frozen=True)
class MTable:
    """Cubic interpolation table of log m on a uniform grid."""

    a0: float
    da: float
    log_m: np.ndarray


@lru_cache(maxsize=64)
def _m_table_cached(x: float, n: int, d: int, nodes: int, upper: float) -> MTable:
    params = make_params(x, n, d, guard=None)
    a = np.linspace(x, upper * x, nodes)
    logm = log_m_function(params, a)
    logm.setflags(write=False)
    return MTable(float(a[0]), float(a[1] - a[0]), logm)


def m_table(params: TiltParams, nodes: int = 4096, upper: float = 10.0) -> MTable:
    # m does not depend on n
    return _m_table_cached(params.x, 1, params.dim, nodes, upper)


# ---------------------------------------------------------------------------
# tilted law of D X_1 given Z_x = z


def tilt_vector(q: QuadForm, params: TiltParams, z) -> np.ndarray:
    """theta = sqrt(2h) D z / sqrt(n), the tilt acting on X_1."""
    return params.scale * q.sqrt * np.asarray(z, dtype=np.float64) / math.sqrt(params.n)


def _support(spec: DistributionSpec):
    if spec.kind == "gaussian":
        return None, None
    fin = spec.expand()
    return fin.points, fin.probs


def _require_tiltable(spec: DistributionSpec):
    if spec.kind not in ("finite", "product", "gaussian"):  # pragma: no cover - kinds are closed
        raise ValueError("tilting needs a finite-support or Gaussian law")


@dataclass(frozen=True)
class TiltedLaw:
    spec: DistributionSpec
    q: QuadForm
    params: TiltParams
    z: np.ndarray
    points: np.ndarray | None
    probs: np.ndarray | None
    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray
    lambda_tilde: np.ndarray
    log_mgf_at_tilt: float


def first_order_matrix(spec: DistributionSpec, q: QuadForm, params: TiltParams, z) -> np.ndarray:
    """E <sqrt(2h) D z, X_1> X_1 X_1^T under the untilted law."""
    d = spec.dim
    if spec.kind == "gaussian":
        return np.zeros((d, d))
    s = params.scale * q.sqrt * np.asarray(z, dtype=np.float64)
    pts, pr = _support(spec)
    lin = pts @ s
    return (pts * (pr * lin)[:, None]).T @ pts


def tilted_law(spec: DistributionSpec, q: QuadForm, params: TiltParams, z) -> TiltedLaw:
    """Conditional law of the tilted summand (in D-coordinates) given Z_x = z."""
    _require_tiltable(spec)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.dim,):
        raise ValueError("z has the wrong dimension")
    if np.linalg.norm(z) > params.z0 * (1 + 1e-12):
        raise ValueError("z lies outside the truncation ball")
    theta = tilt_vector(q, params, z)
    dq = q.sqrt
    lam = np.linalg.eigvalsh(first_order_matrix(spec, q, params, z))
    if spec.kind == "gaussian":
        mu = dq * theta
        sig = np.diag(q.eigenvalues)
        return TiltedLaw(spec, q, params, z, None, None, mu, sig, lam, 0.5 * float(theta @ theta))
    pts, pr = _support(spec)
    logits = np.log(pr) + pts @ theta
    lg = float(special.logsumexp(logits))
    pt = np.exp(logits - lg)
    pt /= pt.sum()
    y = pts * dq
    mu = pt @ y
    yc = y - mu
    sig = (yc * pt[:, None]).T @ yc
    if np.linalg.eigvalsh(sig)[0] <= 0:
        raise OutsideRegimeError("tilt outside validity regime: tilted covariance is not positive definite")
    return TiltedLaw(spec, q, params, z, y, pt, mu, sig, lam, lg)


@dataclass(frozen=True)
class MomentExpansion:
    mu_approx: np.ndarray
    sigma_approx: np.ndarray
    mu_remainder: float
    sigma_remainder: float


def tilted_moment_expansion(spec: DistributionSpec, q: QuadForm, params: TiltParams, z) -> MomentExpansion:
    """Leading terms of the tilted mean and covariance, with exact remainders.

    mean ~ sqrt(2h) Q z / sqrt(n) + D E{<s, X>^2 X} / (2n)
    cov  ~ D (I + E{<s, X> X X^T} / sqrt(n)) D,      s = sqrt(2h) D z
    """
    law = tilted_law(spec, q, params, z)
    n = params.n
    dq = q.sqrt
    s = params.scale * dq * law.z
    lead = params.scale * q.eigenvalues * law.z / math.sqrt(n)
    if spec.kind == "gaussian":
        second = np.zeros(spec.dim)
    else:
        pts, pr = _support(spec)
        lin = pts @ s
        second = dq * ((pr * lin * lin) @ pts) / (2.0 * n)
    mu_approx = lead + second
    m1 = first_order_matrix(spec, q, params, law.z)
    sigma_approx = dq[:, None] * (np.eye(spec.dim) + m1 / math.sqrt(n)) * dq[None, :]
    return MomentExpansion(
        mu_approx,
        sigma_approx,
        float(np.max(np.abs(law.mu_tilde - mu_approx))),
        float(np.max(np.abs(law.sigma_tilde - sigma_approx))),
    )


def lambda_antisymmetry_check(spec, q, params, z, tol: float = 1e-10) -> bool:
    z = np.asarray(z, dtype=np.float64)
    plus = np.sort(np.linalg.eigvalsh(first_order_matrix(spec, q, params, z)))
    minus = np.sort(np.linalg.eigvalsh(first_order_matrix(spec, q, params, -z)))
    return bool(np.allclose(plus, -minus[::-1], rtol=0.0, atol=tol))


@dataclass(frozen=True)
class BTerms:
    b0: float
    b1: float
    b2: float
    b3: float


def b_terms(spec: DistributionSpec, q: QuadForm, params: TiltParams, z, y) -> BTerms:
    """The four first-order correction terms of the tilted density at ``y``."""
    n = params.n
    d = spec.dim
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if spec.kind == "gaussian":
        return BTerms(0.0, 0.0, 0.0, 0.0)
    dq = q.sqrt
    s = params.scale * dq * z
    u = y / dq
    pts, pr = _support(spec)
    lin_s = pts @ s
    lin_u = pts @ u
    lam = np.linalg.eigvalsh(first_order_matrix(spec, q, params, z))
    rn = math.sqrt(n)
    b0 = -float(np.sum(lam)) / (2.0 * rn)
    b1 = float(pr @ (lin_s * lin_u**2 - lin_s**2 * lin_u)) / (2.0 * rn)
    lin_us = lin_u - lin_s
    sq = np.sum(pts * pts, axis=1)
    b2 = float(pr @ (3.0 * sq * lin_us - lin_us**3)) / (6.0 * rn)
    b3 = float(pr @ lin_s**3) / (6.0 * rn)
    assert d == pts.shape[1]
    return BTerms(b0, b1, b2, b3)


def _gauss_logpdf(z: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    r = np.linalg.solve(chol, (z - mean).T).T
    return -0.5 * np.einsum("ij,ij->i", r, r) - np.sum(np.log(np.diag(chol))) - 0.5 * z.shape[1] * math.log(2 * math.pi)


def _fit_gaussian(z: np.ndarray, logw: np.ndarray, inflate: float) -> tuple[np.ndarray, np.ndarray]:
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ z
    zc = z - mean
    cov = inflate * ((zc * w[:, None]).T @ zc) + 1e-6 * np.eye(z.shape[1])
    return mean, np.linalg.cholesky(cov)


def sample_pool(
    spec: DistributionSpec,
    q: QuadForm,
    params: TiltParams,
    rng: np.random.Generator,
    count: int,
    proposal: str = "adaptive",
    defensive: float = 0.2,
    inflate: float = 1.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Pool of ``z`` values and their log weights ``log(pi(z) G^n(...) / g(z))``.

    ``pi`` is the law of Z_x and ``g`` the proposal, so the pool mean of the
    weights estimates ``E G^n(sqrt(2h) D Z_x / sqrt(n))`` without bias.

    * ``"zx"``: ``g = pi``.  For ``x > sqrt(2)`` the weights then have
      infinite variance in the Gaussian limit.
    * ``"matched"``: ``g = N(0, S^2)``, ``S = diag(1 / sqrt(1 - 2h q_i))``,
      the exact mixing law for Gaussian summands.
    * ``"adaptive"``: a pilot pool from ``"matched"`` fixes a Gaussian fit of
      the weighted pool; ``g`` mixes that fit (covariance inflated) with the
      matched law, which keeps weights bounded where the fit is thin.
    """
    d, z0 = params.dim, params.z0
    if proposal == "zx":
        z = sample_zx(params, rng, count)
        return z, log_mixture_weight(spec, q, params, z)
    if proposal not in ("matched", "adaptive"):
        raise ValueError(f"unknown pool proposal {proposal!r}")
    scale = 1.0 / np.sqrt(1.0 - 2.0 * params.h * q.eigenvalues)
    base_chol = np.diag(scale)
    zero = np.zeros(d)
    log_pi_const = math.log(params.kappa) - 0.5 * d * math.log(2 * math.pi)

    def finish(z, log_g):
        sq = np.einsum("ij,ij->i", z, z)
        inside = sq <= z0 * z0
        out = np.full(z.shape[0], -np.inf)
        out[inside] = (
            log_pi_const - 0.5 * sq[inside] - log_g[inside] + log_mixture_weight(spec, q, params, z[inside])
        )
        return out

    if proposal == "matched":
        z = rng.standard_normal((count, d)) * scale
        return z, finish(z, _gauss_logpdf(z, zero, base_chol))
    pilot = rng.standard_normal((max(count // 4, 2 * d + 2), d)) * scale
    pilot_logw = finish(pilot, _gauss_logpdf(pilot, zero, base_chol))
    if not np.isfinite(pilot_logw).any():
        mean, chol = zero, base_chol
    else:
        mean, chol = _fit_gaussian(pilot, pilot_logw, inflate)
    pick = rng.random(count) < defensive
    g = rng.standard_normal((count, d))
    z = np.where(pick[:, None], g * scale, mean + g @ chol.T)
    log_g = np.logaddexp(
        math.log(defensive) + _gauss_logpdf(z, zero, base_chol),
        math.log1p(-defensive) + _gauss_logpdf(z, mean, chol),
    )
    return z, finish(z, log_g)


def log_mixture_weight(spec: DistributionSpec, q: QuadForm, params: TiltParams, z) -> np.ndarray | float:
    """n log G(sqrt(2h) D z / sqrt(n)) for a vector or rows of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    theta = params.scale * z * q.sqrt / math.sqrt(params.n)
    return params.n * log_mgf(spec, theta)


def mixture_weight(spec, q, params, z):
    return np.exp(log_mixture_weight(spec, q, params, z))


@dataclass(frozen=True)
class MgfCheck:
    lhs: float
    rhs_main: float
    envelope: float


def mgf_expansion_check(spec: DistributionSpec, a, n: int, max_ratio: float = 0.1) -> MgfCheck:
    """E exp(<a, W>) against exp(|a|^2/2)(1 + E<a, X>^3 / (6 sqrt n)) and its error shape."""
    a = np.asarray(a, dtype=np.float64)
    norm = float(np.linalg.norm(a))
    if norm > max_ratio * math.sqrt(n):
        raise OutsideRegimeError(f"|a| = {norm} exceeds {max_ratio} sqrt(n)")
    lhs = math.exp(n * log_mgf(spec, a / math.sqrt(n)))
    t = moments(spec).third_tensor
    cube = float(np.einsum("ijk,i,j,k->", t, a, a, a))
    rhs = math.exp(0.5 * norm**2) * (1.0 + cube / (6.0 * math.sqrt(n)))
    env = (norm**4 + norm**6) / n * math.exp(0.5 * norm**2 + norm**3 / math.sqrt(n))
    return MgfCheck(lhs, rhs, env)


# ---------------------------------------------------------------------------
# sampling the tilted sums


def sample_tilted_sums(spec: DistributionSpec, q: QuadForm, params: TiltParams, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw of D W~ = D (X~_1 + ... + X~_n) / sqrt(n) per row of ``z``."""
    n = params.n
    theta = params.scale * z * q.sqrt / math.sqrt(n)
    dq = q.sqrt
    if spec.kind == "gaussian":
        return params.scale * q.eigenvalues * z + dq * rng.standard_normal(z.shape)
    if spec.kind == "finite":
        logits = np.log(spec.probs)[None, :] + theta @ spec.points.T
        logits -= logits.max(axis=1, keepdims=True)
        pt = np.exp(logits)
        pt /= pt.sum(axis=1, keepdims=True)
        counts = rng.multinomial(n, pt)
        s = counts @ spec.points
    else:
        m = spec.marginal
        pts = m.points[:, 0]
        logits = np.log(m.probs)[None, None, :] + theta[:, :, None] * pts[None, None, :]
        logits -= logits.max(axis=2, keepdims=True)
        pt = np.exp(logits)
        pt /= pt.sum(axis=2, keepdims=True)
        counts = rng.multinomial(n, pt)
        s = counts @ pts
    return dq * s / math.sqrt(n)
