import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrvkit import _reference, kernels
from hrvkit.core import softmax_ca_map


def _case(seed, P=9, M=7, d=5):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((P, d)) * 3
    K = rng.standard_normal((M, d)) * 3
    cuts = np.sort(rng.choice(np.arange(1, M), size=min(2, M - 1), replace=False))
    bounds = np.concatenate([[0], cuts, [M]]).astype(np.int64)
    return Q, K, bounds


def test_reference_matches_softmax_then_select():
    Q, K, bounds = _case(0)
    m = softmax_ca_map(Q, K, Q.shape[1]).values
    means = [m[:, lo:hi].mean(axis=1).mean() for lo, hi in zip(bounds[:-1], bounds[1:])]
    assert _reference.fused_select(Q, K, bounds, 1 / np.sqrt(Q.shape[1])) == int(np.argmax(means))


@pytest.mark.skipif("cython" not in kernels.backends(), reason="compiled kernels not built")
@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(2, 12), st.integers(1, 9))
def test_backends_agree(seed, P, M, d):
    Q, K, bounds = _case(seed, P, M, d)
    scale = 1 / np.sqrt(d)
    b = kernels.backends()
    assert b["cython"].fused_select(Q, K, bounds, scale) == b["python"].fused_select(Q, K, bounds, scale)
    np.testing.assert_allclose(b["cython"].logit_abs_mean(Q, K, scale),
                               b["python"].logit_abs_mean(Q, K, scale), rtol=1e-12)


def test_ties_go_to_lowest_index():
    Q = np.zeros((3, 2))
    K = np.ones((4, 2))
    for name, mod in kernels.backends().items():
        assert mod.fused_select(Q, K, np.array([0, 2, 4], dtype=np.int64), 1.0) == 0, name


def test_pure_python_switch():
    env = dict(os.environ, HRV_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import hrvkit.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
