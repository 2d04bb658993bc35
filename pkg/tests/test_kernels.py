import json
import os
import subprocess
import sys

import numpy as np
import pytest

from quadtail import _kernels
from quadtail.streams import substream

pytestmark = pytest.mark.skipif(not _kernels.NUMBA_AVAILABLE, reason="numba not installed")


def _both(name, *args):
    return _kernels.NUMPY_KERNELS[name](*args), _kernels.NUMBA_KERNELS[name](*args)


def test_weighted_sq_norms_parity():
    rng = substream(0, "k")
    a, b = _both("weighted_sq_norms", rng.standard_normal((1000, 4)), np.array([1.0, 0.7, 0.4, 0.1]))
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_lattice_power_parity():
    steps = np.array([[0, 0], [1, 0], [3, 0], [0, 1], [1, 1], [3, 1]], dtype=np.int64)
    probs = np.array([0.1, 0.2, 0.15, 0.25, 0.2, 0.1])
    a, b = _both("lattice_power", steps, probs, 25)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-300)
    assert a.sum() == pytest.approx(1.0, abs=1e-13)


def test_tail_weights_parity():
    rng = substream(1, "k")
    logm = np.cumsum(rng.uniform(0, 0.1, 512))
    r = rng.uniform(0, 60, 5000)
    a, b = _both("tail_weights", r, 2.0, 1.0, 0.1, logm)
    np.testing.assert_allclose(a, b, rtol=1e-13, equal_nan=True)
    assert np.all(a[r <= 2.0] == 0)
    assert np.all(np.isnan(a[r > 1.0 + 0.1 * 511]))


def test_cubic_correction_parity():
    rng = substream(2, "k")
    m = rng.standard_normal((3, 3))
    sinv = m @ m.T + 3 * np.eye(3)
    t = rng.standard_normal((3, 3, 3))
    t = (t + t.transpose(1, 0, 2) + t.transpose(2, 1, 0) + t.transpose(0, 2, 1) + t.transpose(1, 2, 0) + t.transpose(2, 0, 1)) / 6
    v = rng.standard_normal(3)
    a, b = _both("cubic_correction", rng.standard_normal((2000, 3)), sinv, v, t)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_env_flag_selects_numpy_path():
    code = "import json; from quadtail import _kernels as k; print(json.dumps([k.USE_NUMBA, k._ACTIVE is k.NUMPY_KERNELS]))"
    env = dict(os.environ, QUADTAIL_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert json.loads(out.stdout) == [False, True]


def test_both_paths_give_identical_estimates():
    code = (
        "from quadtail import estimate, model;"
        "e = estimate.tilted_is(model.named_spec('skewed3:2'), model.quad_form([1, .5]), 2.5, 40, 4000, 7);"
        "print(repr(e.value), repr(e.std_err))"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, QUADTAIL_NO_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split())
    np.testing.assert_allclose(np.array(outs[0], float), np.array(outs[1], float), rtol=1e-12)
