"""Two-term Edgeworth expansion for sums of i.i.d. mean-zero vectors.

The expansion density is ``p(y) - E p'''(y) Y^3 / (6 sqrt(n))`` with ``p`` the
N(0, Sigma) density; in one dimension this is ``phi(y) (1 + k3 H3(y) / (6 sqrt n))``
with ``H3(y) = y^3 - 3y``.  Writing ``w = Sigma^{-1} y``, ``E p'''(y) Y^3``
equals ``p(y) g(y)`` where ``g(y) = 3 <v, w> - T[w, w, w]`` is a cubic polynomial,
``T`` is the third-moment tensor and ``v_l = sum_jk T_jkl (Sigma^{-1})_jk``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gaussref import Prob, noncentral_ball_prob
from .model import DistributionSpec, QuadForm, moments, sample_sums
from .streams import block_sizes, substream


@dataclass(frozen=True)
class EdgeworthModel:
    sigma: np.ndarray
    third_tensor: np.ndarray
    n: int
    sigma_inv: np.ndarray = field(init=False, repr=False)
    sigma_half: np.ndarray = field(init=False, repr=False)
    eig: np.ndarray = field(init=False, repr=False)
    basis: np.ndarray = field(init=False, repr=False)
    log_norm: float = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        t = np.asarray(self.third_tensor, dtype=np.float64).reshape((s.shape[0],) * 3)
        if not np.allclose(s, s.T, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        for perm in ((1, 0, 2), (0, 2, 1), (2, 1, 0)):
            if not np.allclose(t, t.transpose(perm), atol=1e-12):
                raise ValueError("third-moment tensor must be fully symmetric")
        w, u = np.linalg.eigh(s)
        if w[0] <= 0:
            raise ValueError("Sigma must be positive definite")
        if self.n < 1:
            raise ValueError("n must be positive")
        d = s.shape[0]
        sinv = (u / w) @ u.T
        put = object.__setattr__
        put(self, "sigma", s)
        put(self, "third_tensor", t)
        put(self, "sigma_inv", sinv)
        put(self, "sigma_half", (u * np.sqrt(w)) @ u.T)
        put(self, "eig", w)
        put(self, "basis", u)
        put(self, "log_norm", -0.5 * d * math.log(2 * math.pi) - 0.5 * float(np.sum(np.log(w))))
        put(self, "v", np.einsum("jkl,jk->l", t, sinv))

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def is_symmetric(self) -> bool:
        return not np.any(self.third_tensor)


def model_for_sum(spec: DistributionSpec, q: QuadForm, n: int) -> EdgeworthModel:
    """Model for D W where W is the normalized sum of n draws of a standardized law."""
    ms = moments(spec)
    dq = q.sqrt
    sigma = (dq[:, None] * ms.cov) * dq[None, :]
    third = np.einsum("jkl,j,k,l->jkl", ms.third_tensor, dq, dq, dq)
    return EdgeworthModel(sigma, third, n)


def normal_density(model: EdgeworthModel, y) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    yy = np.atleast_2d(y)
    quad = np.einsum("ni,ij,nj->n", yy, model.sigma_inv, yy)
    out = np.exp(model.log_norm - 0.5 * quad)
    return float(out[0]) if y.ndim <= 1 else out


def third_directional(model: EdgeworthModel, y, u) -> float:
    """Third derivative of the normal density at ``y`` in direction ``u``."""
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    su = model.sigma_inv @ u
    a = float(su @ u)
    b = float(su @ y)
    return normal_density(model, y) * (3.0 * a * b - b**3)


def correction_poly(model: EdgeworthModel, y) -> np.ndarray:
    """``g(y) = E p'''(y) Y^3 / p(y)`` for rows of ``y``."""
    yy = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return _kernels.cubic_correction(yy, model.sigma_inv, model.v, model.third_tensor)


def expansion_density(model: EdgeworthModel, y) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    yy = np.atleast_2d(y)
    out = normal_density(model, yy) * (1.0 - correction_poly(model, yy) / (6.0 * math.sqrt(model.n)))
    return float(out[0]) if y.ndim <= 1 else out


# ---------------------------------------------------------------------------
# ball masses


@dataclass(frozen=True)
class BallMass:
    leading: float
    correction: float
    err: float

    @property
    def total(self) -> float:
        return self.leading + self.correction


def leading_ball_mass(model: EdgeworthModel, centre, radius: float) -> Prob:
    """P(N(0, Sigma) in B(centre, radius))."""
    c = model.basis.T @ np.asarray(centre, dtype=np.float64)
    lam = model.eig
    return noncentral_ball_prob(lam, -c / np.sqrt(lam), radius)


def _correction_1d(model, b, radii):
    s = model.sigma[0, 0]
    t = model.third_tensor[0, 0, 0]

    def second(y):
        p = math.exp(model.log_norm - 0.5 * y * y / s)
        return (y * y / (s * s) - 1.0 / s) * p

    vals = np.array([second(b[0] + a) - second(b[0] - a) if a > 0 else 0.0 for a in radii])
    return t * vals, np.zeros_like(vals)


def _correction_2d(model, b, radii, n_phi=256, n_rho=24):
    # polar coordinates about the centre; trapezoid in angle, Gauss-Legendre panels in radius
    scale = math.sqrt(model.eig[0])
    phi = np.arange(n_phi) * (2 * math.pi / n_phi)
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    gx, gw = np.polynomial.legendre.leggauss(n_rho)
    vals, errs = [], []
    for a in radii:
        if a <= 0:
            vals.append(0.0)
            errs.append(0.0)
            continue
        panels = max(1, int(math.ceil(a / (0.5 * scale))))
        edges = np.linspace(0.0, a, panels + 1)
        est = []
        for nphi in (n_phi, n_phi // 2):
            d_sub = dirs[:: n_phi // nphi]
            total = 0.0
            for lo, hi in zip(edges[:-1], edges[1:]):
                rho = 0.5 * (hi - lo) * gx + 0.5 * (hi + lo)
                wr = 0.5 * (hi - lo) * gw * rho
                pts = b[None, None, :] + rho[:, None, None] * d_sub[None, :, :]
                flat = pts.reshape(-1, 2)
                f = normal_density(model, flat) * correction_poly(model, flat)
                total += float(np.sum(wr[:, None] * f.reshape(rho.size, -1))) * (2 * math.pi / nphi)
            est.append(total)
        vals.append(est[0])
        errs.append(abs(est[0] - est[1]))
    return np.array(vals), np.array(errs)


def _mc_block(model, b, radii, count, seed, block):
    rng = substream(seed, "ball_mass", block)
    z = rng.standard_normal((count, model.dim))
    y = z @ model.sigma_half
    g = correction_poly(model, y)
    dp = np.linalg.norm(y - b, axis=1)
    dm = np.linalg.norm(-y - b, axis=1)
    # antithetic pair: g(-y) = -g(y)
    pair = np.stack([0.5 * ((dp <= a) * g - (dm <= a) * g) for a in radii])
    return pair.sum(axis=1), (pair * pair).sum(axis=1)


def _correction_mc(model, b, radii, samples, seed, workers, n_blocks=16):
    sizes = block_sizes(samples // 2, n_blocks)
    jobs = [(model, b, radii, sz, seed, i) for i, sz in enumerate(sizes) if sz > 0]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        parts = list(ex.map(lambda a: _mc_block(*a), jobs))
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    m = sum(sizes)
    mean = s1 / m
    var = np.maximum(s2 / m - mean * mean, 0.0)
    return mean, np.sqrt(var / m)


def ball_mass_grid(
    model: EdgeworthModel,
    centre,
    radii,
    samples: int = 1_000_000,
    seed: int = 0,
    workers: int = 1,
    method: str = "auto",
) -> list[BallMass]:
    """Integral of the expansion density over balls ``B(centre, a)``."""
    b = np.asarray(centre, dtype=np.float64).reshape(model.dim)
    radii = np.asarray(radii, dtype=np.float64).ravel()
    if np.any(radii < 0):
        raise ValueError("radius must be nonnegative")
    if method == "auto":
        method = "quad" if model.dim <= 2 else "mc"
    if model.is_symmetric:
        corr, cerr = np.zeros_like(radii), np.zeros_like(radii)
    elif method == "quad" and model.dim == 1:
        corr, cerr = _correction_1d(model, b, radii)
    elif method == "quad" and model.dim == 2:
        corr, cerr = _correction_2d(model, b, radii)
    elif method in ("mc", "quad"):
        corr, cerr = _correction_mc(model, b, radii, samples, seed, workers)
    else:
        raise ValueError(f"unknown method {method!r}")
    scale = -1.0 / (6.0 * math.sqrt(model.n))
    out = []
    for a, c, e in zip(radii, corr, cerr):
        lead = leading_ball_mass(model, b, a) if a > 0 else Prob(0.0, 0.0)
        out.append(BallMass(lead.value, float(scale * c), float(lead.err + abs(scale) * e)))
    return out


def ball_mass(model: EdgeworthModel, centre, radius: float, **kw) -> BallMass:
    return ball_mass_grid(model, centre, [radius], **kw)[0]


# ---------------------------------------------------------------------------
# error report


@dataclass(frozen=True)
class ErrorRow:
    n: int
    sup_gap: float
    mc_se: float
    argmax_a: float
    envelope_l3: float
    envelope_l11: float


def edgeworth_error_report(
    spec: DistributionSpec,
    q: QuadForm,
    n_list,
    a_grid,
    mc_samples: int,
    seed: int,
    centre=None,
    workers: int = 1,
    n_blocks: int = 16,
) -> list[ErrorRow]:
    """Sup over ``a_grid`` of |P_MC(D W in B(b, a)) - ball mass| for each n.

    Envelopes are the two error shapes (constants set to 1) for the expansion
    error: ``sigma^d (1 + |b/sigma|^3) E|Sigma^{-1/2} Y|^4 / (n det Sigma^{1/2})``
    and ``(1 + |Sigma^{-1/2} b|) / n^{d/(d+1)} + |Sigma^{-1/2} b|^{(d-1)/2} / n``.
    """
    d = spec.dim
    b = np.zeros(d) if centre is None else np.asarray(centre, dtype=np.float64)
    a_grid = np.asarray(a_grid, dtype=np.float64)
    dq = q.sqrt
    rows = []
    for n in n_list:
        model = model_for_sum(spec, q, int(n))
        sizes = block_sizes(mc_samples, n_blocks)

        def run(i, n=int(n)):
            rng = substream(seed, f"edgeworth-report-{n}", i)
            w = sample_sums(spec, rng, n, sizes[i]) / math.sqrt(n)
            dist = np.linalg.norm(w * dq - b, axis=1)
            return np.array([np.count_nonzero(dist <= a) for a in a_grid])

        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            hits = sum(ex.map(run, range(len(sizes))))
        p_mc = hits / mc_samples
        masses = ball_mass_grid(model, b, a_grid, samples=mc_samples, seed=seed, workers=workers)
        gaps = np.abs(p_mc - np.array([m.total for m in masses]))
        k = int(np.argmax(gaps))
        se = math.sqrt(max(p_mc[k] * (1 - p_mc[k]), 1.0 / mc_samples) / mc_samples) + masses[k].err
        sig2 = float(np.trace(model.sigma))
        sig = math.sqrt(sig2)
        ms = moments(spec)
        fourth = float(ms.fourth_abs)  # E|Sigma^{-1/2} D X|^4 = E|X|^4 for identity covariance
        bw = float(np.linalg.norm(np.linalg.solve(model.sigma_half, b)))
        det_half = math.exp(0.5 * float(np.sum(np.log(model.eig))))
        env3 = sig**d / (n * det_half) * (1 + (np.linalg.norm(b) / sig) ** 3) * fourth
        env11 = (1 + bw) / n ** (d / (d + 1)) + bw ** ((d - 1) / 2) / n
        rows.append(ErrorRow(int(n), float(gaps[k]), se, float(a_grid[k]), env3, env11))
    return rows
