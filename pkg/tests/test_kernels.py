import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscodec import kernels


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=5), st.integers(0, 2**31))
def test_pq_kernels_agree(sizes, seed):
    rng = np.random.default_rng(seed)
    sizes = np.array(sizes, dtype=np.int64)
    sub = np.stack([rng.integers(0, s, 30) for s in sizes], axis=1).astype(np.int64)
    a = kernels.pq_compose_loop(sub, sizes)
    np.testing.assert_array_equal(a, kernels.pq_compose_numpy(sub, sizes))
    np.testing.assert_array_equal(kernels.pq_decompose_loop(a, sizes), sub)
    np.testing.assert_array_equal(kernels.pq_decompose_numpy(a, sizes), sub)


def test_autocorr_kernels_agree(rng):
    t = np.arange(8000) / 16000
    x = np.concatenate([np.sin(2 * np.pi * 180 * t), 0.1 * rng.standard_normal(8000), np.zeros(4000)])
    a = kernels.autocorr_peaks_loop(x, 400, 160, 40, 266, 1e-10)
    b = kernels.autocorr_peaks_numpy(x, 400, 160, 40, 266, 1e-10)
    assert a.shape == b.shape == (1 + (len(x) - 400) // 160,)
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert a[:40].min() > 0.9  # periodic part
    assert not a[-20:].any()  # silence below the energy floor


def test_autocorr_short_input():
    assert kernels.autocorr_peaks_loop(np.zeros(10), 400, 160, 40, 266, 1e-10).shape == (0,)
    assert kernels.autocorr_peaks_numpy(np.zeros(10), 400, 160, 40, 266, 1e-10).shape == (0,)


def test_stoi_kernels_agree(rng):
    x = np.abs(rng.standard_normal((15, 80)))
    y = x + 0.3 * np.abs(rng.standard_normal((15, 80)))
    clip = 1 + 10 ** (15 / 20)
    a = kernels.stoi_correlation_loop(x, y, 30, clip)
    b = kernels.stoi_correlation_numpy(x, y, 30, clip)
    assert abs(a - b) < 1e-12
    assert abs(kernels.stoi_correlation_numpy(x, x, 30, clip) - 1.0) < 1e-12
    assert np.isnan(kernels.stoi_correlation_loop(x[:, :10], y[:, :10], 30, clip))


def test_env_flag_selects_numpy_fallback():
    code = "from dscodec import kernels, _jit; print(_jit.USE_NUMBA, kernels.pq_compose is kernels.pq_compose_numpy)"
    env = dict(os.environ, DSCODEC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
