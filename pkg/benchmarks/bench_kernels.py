"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed (numba compiles on first call), then
``--repeat`` times; the best wall time is reported with the maximum
relative difference between the two outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from quadtail import _kernels
from quadtail.tilt import m_table, make_params


def _cases():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((1_000_000, 5))
    q = np.array([1.0, 0.8, 0.6, 0.4, 0.2])
    steps = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    params = make_params(3.5, 200, 3)
    tab = m_table(params)
    r = np.abs(rng.normal(4.0, 1.5, 1_000_000))
    third = rng.standard_normal((5, 5, 5))
    third = (third + third.transpose(1, 0, 2) + third.transpose(2, 1, 0) + third.transpose(0, 2, 1) + third.transpose(1, 2, 0) + third.transpose(2, 0, 1)) / 6
    sinv = np.eye(5) * 0.9
    v = np.einsum("jkl,jk->l", third, sinv)
    return {
        "weighted_sq_norms": (y, q),
        "lattice_power": (steps, probs, 300),
        "tail_weights": (r, params.x, tab.a0, tab.da, np.asarray(tab.log_m)),
        "cubic_correction": (y[:200_000], sinv, v, third),
    }


def _best(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.NUMBA_AVAILABLE:
        print("numba is not importable; only the numpy path exists")
    print(f"{'kernel':20s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s} {'max rel diff':>13s}")
    for name, case in _cases().items():
        t_np, out_np = _best(_kernels.NUMPY_KERNELS[name], case, args.repeat)
        t_nb, out_nb = _best(_kernels.NUMBA_KERNELS[name], case, args.repeat)
        scale = np.maximum(np.abs(out_np), 1e-300)
        diff = float(np.nanmax(np.abs(out_np - out_nb) / scale))
        print(f"{name:20s} {1e3 * t_np:12.2f} {1e3 * t_nb:12.2f} {t_np / t_nb:8.2f} {diff:13.2e}")


if __name__ == "__main__":
    main()
