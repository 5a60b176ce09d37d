import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst import _kernels_py, kernels

ck = pytest.importorskip("streamst._ckernels", reason="compiled kernels not built")

alphas = st.lists(st.floats(0.0, 2.5, allow_nan=False), min_size=0, max_size=60)


@settings(max_examples=300, deadline=None)
@given(alphas, st.floats(0.0, 0.99), st.integers(0, 5))
def test_fire_walk_backends_agree(a, acc0, u0):
    a = np.array(a, dtype=np.float64)
    s1, f1, r1 = _kernels_py.fire_walk(a, acc0, u0, 1.0, 1e-9)
    s2, f2, r2 = ck.fire_walk(a, acc0, u0, 1.0, 1e-9)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(f1, f2)
    assert r1 == r2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fire_walk_batch_backends_agree(seed):
    rng = np.random.default_rng(seed)
    b, t = int(rng.integers(1, 6)), int(rng.integers(1, 30))
    a = rng.uniform(0, 1.5, (b, t))
    lengths = rng.integers(1, t + 1, size=b)
    out_py = _kernels_py.fire_walk_batch(a, lengths, 1.0, 1e-9)
    out_c = ck.fire_walk_batch(a, lengths, 1.0, 1e-9)
    for x, y in zip(out_py, out_c):
        np.testing.assert_array_equal(x, y)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=30), st.integers(1, 40))
def test_lagging_backends_agree(d, ref_len):
    d = sorted(float(x) for x in d)
    assert _kernels_py.lagging(d, 1000.0, float(ref_len)) == ck.lagging(d, 1000.0, float(ref_len))


def test_backend_selection_env():
    code = "from streamst import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, STREAMST_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("cython", "python")
