"""Hot inner loops, compiled with numba when available.

Each kernel has a pure-numpy twin with identical semantics.  The numba path is
used unless ``QUADTAIL_NO_NUMBA`` is set to a truthy value or numba cannot be
imported.  Both implementations are always importable through ``NUMPY_KERNELS``
and ``NUMBA_KERNELS`` so the benchmark can compare them in one process.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("QUADTAIL_NO_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


# ---------------------------------------------------------------------------
# numpy implementations


def _np_weighted_sq_norms(y, q):
    return (y * y) @ q


def _np_lattice_power(steps, probs, n):
    # steps: (K, 2) nonnegative integer offsets; distribution of the n-fold sum
    span0 = int(steps[:, 0].max())
    span1 = int(steps[:, 1].max())
    dist = np.zeros((n * span0 + 1, n * span1 + 1))
    dist[0, 0] = 1.0
    for i in range(n):
        hi0 = i * span0 + 1
        hi1 = i * span1 + 1
        new = np.zeros_like(dist)
        cur = dist[:hi0, :hi1]
        for k in range(steps.shape[0]):
            a, b = steps[k]
            new[a : a + hi0, b : b + hi1] += probs[k] * cur
        dist = new
    return dist


def _lagrange4(logm, t):
    # cubic Lagrange interpolation on a unit-spaced grid at fractional index t
    m = logm.shape[0]
    i = np.clip(np.floor(t).astype(np.int64), 1, m - 3)
    s = t - i
    f0, f1, f2, f3 = logm[i - 1], logm[i], logm[i + 1], logm[i + 2]
    return (
        -s * (s - 1.0) * (s - 2.0) / 6.0 * f0
        + (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0 * f1
        - (s + 1.0) * s * (s - 2.0) / 2.0 * f2
        + (s + 1.0) * s * (s - 1.0) / 6.0 * f3
    )


def _np_tail_weights(r, x, a0, da, logm):
    """``1{r > x} / m(r)`` with ``log m`` tabulated on ``a0 + da * k``.

    Radii beyond the table get NaN so the caller can evaluate them directly.
    """
    out = np.zeros(r.shape[0])
    hit = r > x
    t = (r[hit] - a0) / da
    vals = np.exp(-_lagrange4(logm, t))
    vals[(t < 0.0) | (t > logm.shape[0] - 1)] = np.nan
    out[hit] = vals
    return out


def _np_cubic_correction(y, sinv, v, third):
    w = y @ sinv
    cubic = np.einsum("ijk,ni,nj,nk->n", third, w, w, w, optimize=True)
    return 3.0 * (w @ v) - cubic


NUMPY_KERNELS = {
    "weighted_sq_norms": _np_weighted_sq_norms,
    "lattice_power": _np_lattice_power,
    "tail_weights": _np_tail_weights,
    "cubic_correction": _np_cubic_correction,
}


# ---------------------------------------------------------------------------
# numba implementations

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _nb_weighted_sq_norms(y, q):
        n, d = y.shape
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += q[j] * y[i, j] * y[i, j]
            out[i] = acc
        return out

    @njit(cache=True)
    def _nb_lattice_power(steps, probs, n):
        k_pts = steps.shape[0]
        span0 = 0
        span1 = 0
        for k in range(k_pts):
            span0 = max(span0, steps[k, 0])
            span1 = max(span1, steps[k, 1])
        n0 = n * span0 + 1
        n1 = n * span1 + 1
        dist = np.zeros((n0, n1))
        new = np.zeros((n0, n1))
        dist[0, 0] = 1.0
        for it in range(n):
            hi0 = it * span0 + 1
            hi1 = it * span1 + 1
            new[:, :] = 0.0
            for k in range(k_pts):
                a = steps[k, 0]
                b = steps[k, 1]
                p = probs[k]
                for u in range(hi0):
                    for v in range(hi1):
                        new[a + u, b + v] += p * dist[u, v]
            dist, new = new, dist
        return dist

    @njit(cache=True)
    def _nb_tail_weights(r, x, a0, da, logm):
        m = logm.shape[0]
        out = np.zeros(r.shape[0])
        for idx in range(r.shape[0]):
            if r[idx] <= x:
                continue
            t = (r[idx] - a0) / da
            if t < 0.0 or t > m - 1:
                out[idx] = np.nan
                continue
            i = int(np.floor(t))
            if i < 1:
                i = 1
            elif i > m - 3:
                i = m - 3
            s = t - i
            val = (
                -s * (s - 1.0) * (s - 2.0) / 6.0 * logm[i - 1]
                + (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0 * logm[i]
                - (s + 1.0) * s * (s - 2.0) / 2.0 * logm[i + 1]
                + (s + 1.0) * s * (s - 1.0) / 6.0 * logm[i + 2]
            )
            out[idx] = np.exp(-val)
        return out

    @njit(cache=True)
    def _nb_cubic_correction(y, sinv, v, third):
        n, d = y.shape
        out = np.empty(n)
        w = np.empty(d)
        for i in range(n):
            for a in range(d):
                acc = 0.0
                for b in range(d):
                    acc += y[i, b] * sinv[b, a]
                w[a] = acc
            lin = 0.0
            for a in range(d):
                lin += w[a] * v[a]
            cub = 0.0
            for a in range(d):
                for b in range(d):
                    wab = w[a] * w[b]
                    for c in range(d):
                        cub += third[a, b, c] * wab * w[c]
            out[i] = 3.0 * lin - cub
        return out

    NUMBA_KERNELS = {
        "weighted_sq_norms": _nb_weighted_sq_norms,
        "lattice_power": _nb_lattice_power,
        "tail_weights": _nb_tail_weights,
        "cubic_correction": _nb_cubic_correction,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = dict(NUMPY_KERNELS)

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def weighted_sq_norms(y: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``sum_j q_j y_j**2``."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    return _ACTIVE["weighted_sq_norms"](y, np.ascontiguousarray(q, dtype=np.float64))


def lattice_power(steps: np.ndarray, probs: np.ndarray, n: int) -> np.ndarray:
    """Law of the sum of ``n`` i.i.d. draws on a 2-d index lattice.

    ``steps`` are nonnegative integer offsets with probabilities ``probs``;
    cell ``(i, j)`` of the result is the mass at index sum ``(i, j)``.
    All terms are nonnegative, so every cell carries relative rounding error
    of order ``n * K * eps``.
    """
    steps = np.ascontiguousarray(steps, dtype=np.int64)
    return _ACTIVE["lattice_power"](steps, np.ascontiguousarray(probs, dtype=np.float64), int(n))


def tail_weights(r, x, a0, da, logm) -> np.ndarray:
    r = np.ascontiguousarray(r, dtype=np.float64)
    return _ACTIVE["tail_weights"](r, float(x), float(a0), float(da), np.ascontiguousarray(logm))


def cubic_correction(y, sinv, v, third) -> np.ndarray:
    """``3 <v, S^-1 y> - T[S^-1 y, S^-1 y, S^-1 y]`` for each row ``y``."""
    return _ACTIVE["cubic_correction"](
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(sinv, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(third, dtype=np.float64),
    )
