"""Gaussian reference quantities for the ellipsoid tail P(|D Z| > x).

The workhorse is :func:`imhof_sf`, the survival function of a (possibly
noncentral, possibly indefinite) weighted chi-square sum obtained by
inverting its characteristic function.  On top of it sit the ball tail, the
explicit lower bound for weighted chi-square tails, the sphere fraction
``xi(a)`` and the radial integral used to control tilted tail integrals.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate, special

from .model import QuadForm
from .streams import substream


class QuadratureError(RuntimeError):
    """Characteristic-function inversion did not reach its tolerance."""


class Prob(NamedTuple):
    value: float
    err: float


# ---------------------------------------------------------------------------
# characteristic-function inversion


def _theta_rho(u, lam, dof, nc):
    lu = np.multiply.outer(u, lam)
    lu2 = lu * lu
    theta1 = 0.5 * np.sum(dof * np.arctan(lu) + nc * lu / (1.0 + lu2), axis=-1)
    log_rho = np.sum(0.25 * dof * np.log1p(lu2) + 0.5 * nc * lu2 / (1.0 + lu2), axis=-1)
    return theta1, log_rho


def imhof_sf(lam, t: float, dof=None, nc=None, tol: float = 1e-12) -> Prob:
    """P(sum_j lam_j chi2(dof_j, nc_j) > t).

    ``nc`` are noncentralities (sum of squared means).  Weights may have
    either sign.  The half-line integral is split at a few oscillation
    periods; the remainder is done by QAWF Fourier quadrature, which
    extrapolates over oscillation cycles.
    """
    lam = np.asarray(lam, dtype=np.float64).ravel()
    dof = np.ones_like(lam) if dof is None else np.asarray(dof, dtype=np.float64).ravel()
    nc = np.zeros_like(lam) if nc is None else np.asarray(nc, dtype=np.float64).ravel()
    keep = lam != 0.0
    lam, dof, nc = lam[keep], dof[keep], nc[keep]
    if lam.size == 0:
        return Prob(1.0 if t < 0 else 0.0, 0.0)
    if np.all(lam > 0) and t <= 0:
        return Prob(1.0, 0.0)
    if np.all(lam < 0) and t >= 0:
        return Prob(0.0, 0.0)
    omega = 0.5 * t

    def full(u):
        if u == 0.0:
            return 0.5 * float(np.sum(lam * (dof + nc))) - omega
        th, lr = _theta_rho(u, lam, dof, nc)
        return math.sin(th - omega * u) / (u * math.exp(lr))

    def amp_cos(u):
        th, lr = _theta_rho(u, lam, dof, nc)
        return math.sin(th) / (u * math.exp(lr))

    def amp_sin(u):
        th, lr = _theta_rho(u, lam, dof, nc)
        return -math.cos(th) / (u * math.exp(lr))

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            if omega == 0.0:
                v, e = integrate.quad(full, 0.0, np.inf, epsabs=tol, epsrel=0.0, limit=2000)
            else:
                split = 8.0 * math.pi / abs(omega)
                v0, e0 = integrate.quad(full, 0.0, split, epsabs=tol, epsrel=0.0, limit=4000)
                sgn = 1.0 if omega > 0 else -1.0
                v1, e1 = integrate.quad(amp_cos, split, np.inf, weight="cos", wvar=abs(omega), epsabs=tol, limlst=200)
                v2, e2 = integrate.quad(amp_sin, split, np.inf, weight="sin", wvar=abs(omega), epsabs=tol, limlst=200)
                # sin(th - w u) = sin th cos(w u) - cos th sin(w u)
                v, e = v0 + v1 + sgn * v2, e0 + e1 + e2
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(
                f"characteristic-function inversion failed for lam={lam.tolist()}, "
                f"dof={dof.tolist()}, nc={nc.tolist()}, t={t}: {exc}"
            ) from None
    p = 0.5 + v / math.pi
    err = e / math.pi + 4e-16
    if not (-1e-8 <= p <= 1 + 1e-8):
        raise QuadratureError(f"inversion produced probability {p} outside [0, 1] (t={t})")
    return Prob(min(1.0, max(0.0, p)), err)


def gaussian_ball_tail(q: QuadForm, x: float) -> Prob:
    """P(|Q^{1/2} Z| > x) for Z standard normal."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return Prob(1.0, 0.0)
    d = q.dim
    if q.is_identity:
        return Prob(float(special.gammaincc(0.5 * d, 0.5 * x * x)), 1e-15)
    lam = np.array([g[0] for g in q.groups])
    dof = np.array([g[1] for g in q.groups], dtype=np.float64)
    return imhof_sf(lam, x * x, dof=dof)


def noncentral_ball_prob(lam, centre, radius: float) -> Prob:
    """P(sum_j lam_j (Z_j + c_j)^2 <= radius^2)."""
    lam = np.asarray(lam, dtype=np.float64)
    c = np.asarray(centre, dtype=np.float64)
    if radius <= 0:
        return Prob(0.0, 0.0)
    tail = imhof_sf(lam, radius * radius, nc=c * c)
    return Prob(1.0 - tail.value, tail.err)


# ---------------------------------------------------------------------------
# weighted chi-square lower bound


@dataclass(frozen=True)
class ChiSqBound:
    bound: float
    p: int
    r: int


def chisq_lower_bound(groups, x: float) -> ChiSqBound:
    """Lower-bound shape for P(sum lam_i chi2_{v_i} >= x^2), without its constant.

    ``groups`` is a QuadForm or a sequence of ``(lam_i, v_i)`` with
    ``1 = lam_1 > lam_2 > ... > 0``.  Returns the bound
    ``prod_{i>=p} (1-lam_i)^{-v_i/2} x^{r-2} exp(-x^2/2)`` with its
    indices ``p`` (1-based, ``s+1`` when no group qualifies) and ``r``.
    """
    if isinstance(groups, QuadForm):
        groups = groups.groups
    if x <= 1:
        raise ValueError("bound needs x > 1")
    s = len(groups)
    p = s + 1
    for i, (lam, _) in enumerate(groups, start=1):
        if (1.0 - lam) * x * x / lam > 1.0:
            p = i
            break
    r = sum(v for _, v in groups[: p - 1])
    log_prod = sum(-0.5 * v * math.log1p(-lam) for lam, v in groups[p - 1 :])
    bound = math.exp(log_prod + (r - 2) * math.log(x) - 0.5 * x * x)
    return ChiSqBound(bound, p, r)


# ---------------------------------------------------------------------------
# sphere fraction xi(a)


def _xi_planar(q1: float, q2: float, a: np.ndarray) -> np.ndarray:
    # angular measure of {theta in [0, pi/2]: q1 cos^2 + q2 sin^2 > 1/a^2},
    # the left-hand side being decreasing in theta; boundary found by bisection
    a = np.asarray(a, dtype=np.float64)
    target = 1.0 / (a * a)
    f0 = q1 - target
    f1 = q2 - target
    lo = np.zeros_like(a)
    hi = np.full_like(a, 0.5 * math.pi)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        above = q1 * np.cos(mid) ** 2 + q2 * np.sin(mid) ** 2 > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    frac = lo / (0.5 * math.pi)
    frac = np.where(f0 <= 0, 0.0, frac)
    return np.where(f1 > 0, 1.0, frac)


@lru_cache(maxsize=32)
def _sphere_levels(q: tuple, samples: int, seed: int) -> np.ndarray:
    # sorted values of sum q_i u_i^2 over uniform directions in antithetic pairs
    rng = substream(seed, "sphere_fraction")
    half = (samples + 1) // 2
    g = rng.standard_normal((half, len(q)))
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    u = np.concatenate([u, -u])[:samples]
    s = (u * u) @ np.asarray(q)
    s.sort()
    s.setflags(write=False)
    return s


class SphereFraction:
    """Cached ``xi`` on a grid of ``a`` in ``[1, q_d^{-1/2}]``.

    For d >= 3 the grid values are empirical survival fractions of
    ``sum q_i u_i^2`` over a fixed set of directions, hence nondecreasing in
    ``a`` by construction.  ``method='cf'`` fills the grid by exact inversion
    of ``P(sum (q_i - a^{-2}) Z_i^2 > 0)`` instead.
    """

    def __init__(self, q: QuadForm, grid_size: int = 2048, samples: int = 1_000_000, seed: int = 0, method: str = "auto"):
        self.q = q
        self.a_max = 1.0 / math.sqrt(q.eigenvalues[-1])
        self.grid = np.linspace(1.0, self.a_max, grid_size) if self.a_max > 1.0 else np.array([1.0])
        self.method = method
        self.samples = samples
        self.seed = seed
        self.values = sphere_fraction(q, self.grid, samples=samples, seed=seed, method=method)

    def __call__(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if self.q.dim <= 2 and self.method in ("auto", "exact"):
            return sphere_fraction(self.q, a, method="exact")
        if self.grid.size == 1:
            return np.where(a > 1.0, 1.0, 0.0)
        out = np.interp(a, self.grid, self.values)
        return np.where(a <= 1.0, 0.0, np.where(a >= self.a_max, 1.0, out))


def sphere_fraction(q: QuadForm, a, samples: int = 1_000_000, seed: int = 0, method: str = "auto"):
    """Fraction of directions ``u`` on the unit sphere with ``sum q_i u_i^2 > 1/a^2``.

    ``method``: ``auto`` (exact for d <= 2, Monte Carlo otherwise), ``mc``,
    ``exact`` (d <= 2 only) or ``cf`` (characteristic-function inversion).
    """
    scalar = np.ndim(a) == 0
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if np.any(a <= 0):
        raise ValueError("a must be positive")
    qv = q.eigenvalues
    d = q.dim
    if method == "auto":
        method = "exact" if d <= 2 else "mc"
    if method == "exact":
        if d == 1:
            out = np.where(a > 1.0, 1.0, 0.0)
        elif d == 2:
            out = _xi_planar(qv[0], qv[1], a)
        else:
            raise ValueError("exact sphere fraction is only available for d <= 2")
    elif method == "mc":
        s = _sphere_levels(tuple(qv.tolist()), int(samples), int(seed))
        out = 1.0 - np.searchsorted(s, 1.0 / (a * a), side="right") / s.size
    elif method == "cf":
        out = np.empty_like(a)
        for i, ai in enumerate(a):
            if ai <= 1.0:
                out[i] = 0.0
            elif ai * ai * qv[-1] >= 1.0:
                out[i] = 1.0
            else:
                out[i] = imhof_sf(qv - 1.0 / (ai * ai), 0.0).value
    else:
        raise ValueError(f"unknown method {method!r}")
    out = np.where(a <= 1.0, 0.0, out)
    out = np.where(a * a * qv[-1] >= 1.0, 1.0, out)
    return float(out[0]) if scalar else out


def cap_delta(d: int) -> float:
    """The ``delta`` with ``P(u_1 > 1/(1+delta)) = 1/16`` for ``u`` uniform on S^{d-1}."""
    if d < 2:
        raise ValueError("cap fraction 1/16 is not attained for d = 1")
    # u_1^2 ~ Beta(1/2, (d-1)/2), and u_1 is symmetric
    t2 = special.betaincinv(0.5, 0.5 * (d - 1), 1.0 - 2.0 / 16.0)
    return 1.0 / math.sqrt(t2) - 1.0


# ---------------------------------------------------------------------------
# radial integral


class TiltTooStrongError(ValueError):
    pass


def _upper_gauss_moment(k: float, beta: float, lower: float) -> float:
    # int_lower^inf u^k exp(-beta u^2) du
    s = 0.5 * (k + 1.0)
    return 0.5 * beta ** (-s) * special.gamma(s) * special.gammaincc(s, beta * lower * lower)


def weighted_radial_integral(
    q: QuadForm,
    x: float,
    r: float,
    c: float,
    n: int,
    xi: SphereFraction | None = None,
    nodes_per_cell: int = 8,
) -> float:
    """int_{|Dy| > x} |y|^r exp(-|y|^2/2 + c x |y|^2 / sqrt(n)) dy by radial reduction."""
    d = q.dim
    if x <= 1:
        raise ValueError("need x > 1")
    if r < 2 - d:
        raise ValueError("need r >= 2 - d")
    if c < 0:
        raise ValueError("need c >= 0")
    growth = c * x / math.sqrt(n)
    if growth >= 0.5:
        raise TiltTooStrongError("tilt too strong: c x / sqrt(n) must stay below 1/2")
    beta = 0.5 - growth
    k = r + d - 1
    surface = 2.0 * math.pi ** (0.5 * d) / special.gamma(0.5 * d)
    a_max = 1.0 / math.sqrt(q.eigenvalues[-1])
    if d == 1 or a_max <= 1.0:
        return surface * _upper_gauss_moment(k, beta, x)
    if xi is None:
        xi = SphereFraction(q)
    # composite Gauss-Legendre over the grid cells of a in [1, a_max]
    edges = xi.grid if xi.grid.size > 1 else np.linspace(1.0, a_max, 2049)
    gx, gw = np.polynomial.legendre.leggauss(nodes_per_cell)
    lo, hi = edges[:-1, None], edges[1:, None]
    a = 0.5 * (hi - lo) * gx[None, :] + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * gw[None, :]
    u = a * x
    inner = np.sum(w * xi(a) * u**k * np.exp(-beta * u * u)) * x
    outer = _upper_gauss_moment(k, beta, a_max * x)
    return surface * (inner + outer)
