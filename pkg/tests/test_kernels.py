"""Tests for the Lorenz-96 stepping kernels and backend selection."""

import subprocess
import sys

import numpy as np
import pytest

from projda import kernels
from projda.kernels import _l96_rk4_batch_np, l96_rk4_batch


def test_backend_name_is_known():
    assert kernels.backend_name() in ("numba", "numpy")


def test_active_backend_matches_numpy_reference_bitwise():
    rng = np.random.default_rng(7)
    states = 8.0 + rng.standard_normal((13, 40))
    out = l96_rk4_batch(states, 8.0, 0.01, 5)
    ref = _l96_rk4_batch_np(states.copy(), 8.0, 0.01, 5)
    # both backends perform the arithmetic in the same order
    assert np.array_equal(out, ref)


def test_input_not_modified():
    rng = np.random.default_rng(3)
    states = rng.standard_normal((4, 40))
    before = states.copy()
    l96_rk4_batch(states, 8.0, 0.01, 3)
    assert np.array_equal(states, before)


def test_fixed_point_preserved():
    states = np.full((2, 40), 8.0)
    out = l96_rk4_batch(states, 8.0, 0.01, 5)
    assert np.allclose(out, 8.0, atol=1e-13)


def test_env_flag_selects_numpy_backend():
    code = (
        "import os; os.environ['PROJDA_DISABLE_NUMBA'] = '1';"
        "from projda import kernels; print(kernels.backend_name())"
    )
    got = subprocess.run([sys.executable, "-c", code],
                         capture_output=True, text=True, check=True)
    assert got.stdout.strip() == "numpy"


@pytest.mark.skipif(kernels.backend_name() != "numba",
                    reason="numba backend not active")
def test_numpy_fallback_is_bit_identical_across_processes():
    code = (
        "import os; os.environ['PROJDA_DISABLE_NUMBA'] = '1';"
        "import numpy as np; from projda import kernels;"
        "rng = np.random.default_rng(11);"
        "states = 8.0 + rng.standard_normal((5, 40));"
        "out = kernels.l96_rk4_batch(states, 8.0, 0.01, 5);"
        "print(out.tobytes().hex())"
    )
    got = subprocess.run([sys.executable, "-c", code],
                         capture_output=True, text=True, check=True)
    rng = np.random.default_rng(11)
    states = 8.0 + rng.standard_normal((5, 40))
    here = l96_rk4_batch(states, 8.0, 0.01, 5)
    assert got.stdout.strip() == here.tobytes().hex()
