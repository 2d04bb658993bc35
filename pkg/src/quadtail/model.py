"""Input laws of X_1 and the quadratic form.

A :class:`DistributionSpec` is one of three kinds:

* ``finite``   -- finitely many support points in R^d with probabilities,
* ``product``  -- d i.i.d. copies of a one-dimensional finite law,
* ``gaussian`` -- the standard normal N(0, I_d).

All three have an everywhere-finite MGF.  Arrays stored on the frozen
dataclasses are marked read-only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import logsumexp

GROUP_RTOL = 1e-12


class DegenerateDistributionError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    dim: int
    points: np.ndarray | None = None
    probs: np.ndarray | None = None
    marginal: "DistributionSpec | None" = None

    def __post_init__(self):
        if self.kind not in ("finite", "product", "gaussian"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.kind == "finite":
            pts = np.asarray(self.points, dtype=np.float64)
            if pts.ndim == 1:
                pts = pts[:, None]
            pr = np.asarray(self.probs, dtype=np.float64)
            if pts.shape != (pr.shape[0], self.dim):
                raise ValueError("points must have shape (len(probs), dim)")
            if np.any(pr < 0) or abs(pr.sum() - 1.0) > 1e-12:
                raise ValueError("probabilities must be nonnegative and sum to 1")
            object.__setattr__(self, "points", _frozen(pts))
            object.__setattr__(self, "probs", _frozen(pr))
        elif self.kind == "product":
            m = self.marginal
            if m is None or m.kind != "finite" or m.dim != 1:
                raise ValueError("product kind needs a one-dimensional finite marginal")

    @property
    def is_standard_gaussian(self) -> bool:
        return self.kind == "gaussian"

    def expand(self) -> "DistributionSpec":
        """Finite-support representation (product laws are enumerated)."""
        if self.kind == "finite":
            return self
        if self.kind == "gaussian":
            raise ValueError("Gaussian law has no finite-support representation")
        m = self.marginal
        k = m.probs.shape[0]
        if k**self.dim > 2_000_000:
            raise ValueError(f"product support too large to enumerate ({k}^{self.dim})")
        grids = np.meshgrid(*([np.arange(k)] * self.dim), indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
        pts = m.points[idx, 0]
        pr = np.prod(m.probs[idx], axis=1)
        pr = pr / pr.sum()
        return DistributionSpec("finite", self.dim, pts, pr)


def finite_support(points, probs) -> DistributionSpec:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return DistributionSpec("finite", pts.shape[1], pts, probs)


def product_iid(marginal: DistributionSpec, dim: int) -> DistributionSpec:
    return DistributionSpec("product", dim, marginal=marginal)


def gaussian(dim: int) -> DistributionSpec:
    return DistributionSpec("gaussian", dim)


def rademacher(dim: int = 1) -> DistributionSpec:
    m = finite_support([-1.0, 1.0], [0.5, 0.5])
    return m if dim == 1 else product_iid(m, dim)


def two_point(p: float) -> DistributionSpec:
    """Standardized Bernoulli(p): values -sqrt(p/q), sqrt(q/p)."""
    q = 1.0 - p
    return finite_support([-math.sqrt(p / q), math.sqrt(q / p)], [q, p])


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadForm:
    """Diagonal form with eigenvalues ``1 = q_1 >= ... >= q_d > 0``."""

    eigenvalues: np.ndarray
    groups: tuple[tuple[float, int], ...] = field(default=())
    basis: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.eigenvalues, dtype=np.float64)
        if q.ndim != 1 or q.size == 0:
            raise ValueError("eigenvalues must be a nonempty vector")
        if np.any(np.diff(q) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        if abs(q[0] - 1.0) > 1e-12 or q[-1] <= 0:
            raise ValueError("need 1 = q_1 >= ... >= q_d > 0")
        q = q.copy()
        q[0] = 1.0
        object.__setattr__(self, "eigenvalues", _frozen(q))
        object.__setattr__(self, "groups", group_eigenvalues(q))
        if self.basis is not None:
            object.__setattr__(self, "basis", _frozen(self.basis))

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def sqrt(self) -> np.ndarray:
        """Diagonal of D = Q^{1/2}."""
        return np.sqrt(self.eigenvalues)

    @property
    def det_sqrt(self) -> float:
        return float(np.prod(self.sqrt))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.eigenvalues == 1.0))


def group_eigenvalues(q: np.ndarray, rtol: float = GROUP_RTOL) -> tuple[tuple[float, int], ...]:
    groups: list[list] = []
    for v in q:
        if groups and abs(v - groups[-1][0]) <= rtol * abs(groups[-1][0]):
            groups[-1][1] += 1
        else:
            groups.append([float(v), 1])
    return tuple((lam, mult) for lam, mult in groups)


def quad_form(values) -> QuadForm:
    """QuadForm from eigenvalues given in any order; the largest must be 1."""
    q = np.sort(np.asarray(values, dtype=np.float64).ravel())[::-1]
    return QuadForm(q)


def identity_form(dim: int) -> QuadForm:
    return QuadForm(np.ones(dim))


def sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(w)) @ v.T


def _check_spd(m: np.ndarray, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ValueError(f"{name} must be a symmetric matrix")
    w = np.linalg.eigvalsh(m)
    if w[0] <= 0:
        raise ValueError(f"{name} must be positive definite")
    return m


def reduce_form(sigma_bar, q_bar, x_bar: float) -> tuple[QuadForm, float]:
    """Reduce P(|Qbar^{1/2} Wbar| > xbar) to an identity-covariance problem.

    The returned QuadForm carries the eigenbasis as ``basis`` (columns);
    standardized summands must be rotated by ``basis.T`` to match.
    """
    sigma_bar = _check_spd(sigma_bar, "Sigma_bar")
    q_bar = _check_spd(q_bar, "Q_bar")
    s_half = sym_sqrt(sigma_bar)
    m = s_half @ q_bar @ s_half
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    op = w[0]
    return QuadForm(w / op, basis=v), float(x_bar) / math.sqrt(op)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSet:
    mean: np.ndarray
    cov: np.ndarray
    third_tensor: np.ndarray
    fourth_abs: float


def moments(spec: DistributionSpec) -> MomentSet:
    """Exact raw moments: E X, Cov X, E X_j X_k X_l and E|X|^4."""
    d = spec.dim
    if spec.kind == "gaussian":
        return MomentSet(_frozen(np.zeros(d)), _frozen(np.eye(d)), _frozen(np.zeros((d, d, d))), float(d * (d + 2)))
    if spec.kind == "finite":
        x, p = spec.points, spec.probs
        mean = p @ x
        xc = x - mean
        cov = (xc * p[:, None]).T @ xc
        third = np.einsum("k,ki,kj,kl->ijl", p, x, x, x)
        fourth = float(p @ (np.sum(x * x, axis=1) ** 2))
        return MomentSet(_frozen(mean), _frozen(cov), _frozen(third), fourth)
    m = spec.marginal
    raw = [float(m.probs @ m.points[:, 0] ** k) for k in range(5)]
    mean = np.full(d, raw[1])
    cov = np.eye(d) * (raw[2] - raw[1] ** 2)
    third = np.empty((d, d, d))
    for i in range(d):
        for j in range(d):
            for l in range(d):
                counts = np.bincount([i, j, l], minlength=d)
                third[i, j, l] = np.prod([raw[c] for c in counts if c])
    fourth = d * raw[4] + d * (d - 1) * raw[2] ** 2
    return MomentSet(_frozen(mean), _frozen(cov), _frozen(third), float(fourth))


def standardize(spec: DistributionSpec) -> DistributionSpec:
    """Affinely whiten to mean zero and identity covariance (symmetric root)."""
    if spec.kind == "gaussian":
        return spec
    if spec.kind == "product":
        return product_iid(standardize(spec.marginal), spec.dim)
    ms = moments(spec)
    w, v = np.linalg.eigh(ms.cov)
    if w[0] <= 1e-12 * max(1.0, w[-1]):
        raise DegenerateDistributionError("degenerate distribution")
    inv_half = (v / np.sqrt(w)) @ v.T
    pts = (spec.points - ms.mean) @ inv_half
    return DistributionSpec("finite", spec.dim, pts, spec.probs)


def rotate(spec: DistributionSpec, basis: np.ndarray) -> DistributionSpec:
    """Law of ``basis.T @ X`` (coordinates in the eigenbasis of a form)."""
    if spec.kind == "gaussian":
        return spec
    fin = spec.expand()
    return DistributionSpec("finite", spec.dim, fin.points @ np.asarray(basis), fin.probs)


# ---------------------------------------------------------------------------


def log_mgf(spec: DistributionSpec, b) -> np.ndarray | float:
    """log E exp(<b, X>) for a vector ``b`` or a batch of rows."""
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    b2 = np.atleast_2d(b)
    if b2.shape[1] != spec.dim:
        raise ValueError("argument dimension does not match the law")
    if spec.kind == "gaussian":
        out = 0.5 * np.sum(b2 * b2, axis=1)
    elif spec.kind == "finite":
        out = logsumexp(b2 @ spec.points.T, b=spec.probs[None, :], axis=1)
    else:
        m = spec.marginal
        pts = m.points[:, 0]
        per = logsumexp(b2[:, :, None] * pts[None, None, :], b=m.probs[None, None, :], axis=2)
        out = per.sum(axis=1)
    return float(out[0]) if single else out


def mgf(spec: DistributionSpec, b) -> float | np.ndarray:
    return np.exp(log_mgf(spec, b))


# ---------------------------------------------------------------------------


def sample(spec: DistributionSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` i.i.d. draws of X_1 as a ``(count, d)`` array."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if spec.kind == "gaussian":
        return rng.standard_normal((count, spec.dim))
    if spec.kind == "finite":
        idx = rng.choice(spec.probs.shape[0], size=count, p=spec.probs)
        return spec.points[idx].copy()
    m = spec.marginal
    idx = rng.choice(m.probs.shape[0], size=(count, spec.dim), p=m.probs)
    return m.points[idx, 0]


def sample_sums(spec: DistributionSpec, rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` draws of X_1 + ... + X_n, via multinomial support counts."""
    if spec.kind == "gaussian":
        return math.sqrt(n) * rng.standard_normal((count, spec.dim))
    if spec.kind == "finite":
        counts = rng.multinomial(n, spec.probs, size=count)
        return counts @ spec.points
    m = spec.marginal
    counts = rng.multinomial(n, m.probs, size=(count, spec.dim))
    return counts @ m.points[:, 0]


# ---------------------------------------------------------------------------
# config files and named laws


def _load_tree(path: Path) -> dict[str, Any]:
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def spec_from_dict(tree: dict[str, Any]) -> DistributionSpec:
    kind = tree["kind"]
    if kind == "gaussian":
        return gaussian(int(tree["dim"]))
    if kind == "finite":
        spec = finite_support(tree["points"], tree["probs"])
        if "dim" in tree and int(tree["dim"]) != spec.dim:
            raise ValueError("dim does not match the support points")
        return spec
    if kind == "product":
        return product_iid(spec_from_dict(tree["marginal"]), int(tree["dim"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


def spec_to_dict(spec: DistributionSpec) -> dict[str, Any]:
    if spec.kind == "gaussian":
        return {"kind": "gaussian", "dim": spec.dim}
    if spec.kind == "finite":
        return {"kind": "finite", "dim": spec.dim, "points": spec.points.tolist(), "probs": spec.probs.tolist()}
    return {"kind": "product", "dim": spec.dim, "marginal": spec_to_dict(spec.marginal)}


SKEWED3_POINTS = (-1.0, 0.0, 2.0)
SKEWED3_PROBS = (0.3, 0.5, 0.2)


def skewed3_marginal() -> DistributionSpec:
    return standardize(finite_support(list(SKEWED3_POINTS), list(SKEWED3_PROBS)))


def symmetric4_marginal() -> DistributionSpec:
    """Symmetric four-point law with unit variance and E X^4 = 3.

    Mass 0.05 at each of +-a and 0.45 at each of +-b; a/b is irrational, so
    sums do not live on a lattice.
    """
    a2 = 1.0 + math.sqrt(18.0)
    b2 = (1.0 - 0.1 * a2) / 0.9
    a, b = math.sqrt(a2), math.sqrt(b2)
    return finite_support([-a, -b, b, a], [0.05, 0.45, 0.45, 0.05])


def named_spec(name: str) -> DistributionSpec:
    """Built-in laws: ``rademacher1d``, ``rademacher:<d>``, ``gaussian:<d>``,
    ``twopoint:<p>``, ``skewed3:<d>``, ``symmetric4``."""
    head, _, arg = name.partition(":")
    if head == "rademacher1d":
        return rademacher(1)
    if head == "rademacher":
        return rademacher(int(arg or 1))
    if head == "gaussian":
        return gaussian(int(arg or 1))
    if head == "twopoint":
        return two_point(float(arg or 0.2))
    if head == "skewed3":
        d = int(arg or 1)
        m = skewed3_marginal()
        return m if d == 1 else product_iid(m, d)
    if head == "symmetric4":
        return symmetric4_marginal()
    raise KeyError(name)


def load_spec(ref: str) -> DistributionSpec:
    """A named law or a JSON/TOML file with keys kind, dim, points, probs, marginal."""
    path = Path(ref)
    if path.exists():
        return spec_from_dict(_load_tree(path))
    try:
        return named_spec(ref)
    except (KeyError, ValueError):
        raise ValueError(f"no distribution file or built-in law named {ref!r}") from None
