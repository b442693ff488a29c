"""Shared numeric oracles for the test suite.

Gradient checks use central finite differences computed outside the autodiff
engine; closeness uses a relative tolerance with an absolute floor so that
near-zero entries do not blow up the ratio.
"""

import numpy as np

GRAD_RTOL = 1e-5
GRAD_FLOOR = 1e-8


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    ``f`` receives the (temporarily perturbed) array and returns a float.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_close(got, want, rtol=GRAD_RTOL, floor=GRAD_FLOOR):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    assert got.shape == want.shape, f"shape {got.shape} vs {want.shape}"
    scale = np.maximum(np.abs(got), np.abs(want))
    err = np.abs(got - want)
    bad = err > np.maximum(floor, rtol * scale)
    assert not bad.any(), (
        f"mismatch at {np.argwhere(bad)[:5].tolist()}: "
        f"got {got[bad][:5]}, want {want[bad][:5]}")
