import os
import subprocess
import sys

import numpy as np
import pytest

from constrained_kyle import _kernels
from constrained_kyle.simulate import coefficient_table

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("value,expected", [("0", "numpy"), ("off", "numpy"), ("1", None)])
def test_env_flag_selects_backend(value, expected):
    env = {**os.environ, "CONSTRAINED_KYLE_NUMBA": value}
    out = subprocess.run([sys.executable, "-c", "from constrained_kyle import _kernels; print(_kernels.resolve_backend())"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    if expected is None:
        expected = "numba" if _kernels.HAVE_NUMBA else "numpy"
    assert out == expected


def test_resolve_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _kernels.resolve_backend("fortran")


@needs_numba
def test_em_paths_bitwise_equal(sol):
    n = 400
    coef = coefficient_table(sol, n)
    rng = np.random.default_rng(3)
    a = rng.standard_normal(64)
    dw = rng.standard_normal((64, n)) * np.sqrt(1 / n)
    rec = np.array([0, 100, 200, n])
    x = _kernels.em_paths(coef, a, dw, 1 / n, 1.0, rec, "numpy")
    y = _kernels.em_paths(coef, a, dw, 1 / n, 1.0, rec, "numba")
    for u, w in zip(x, y):
        np.testing.assert_array_equal(u, w)


@needs_numba
def test_rk4_r_sigma1_backends(sol):
    p = sol.params
    x = _kernels.rk4_r_sigma1(sol.r0, p.sigma_a**2, p.sigma_w**2, 1e-3, 990, "numpy")
    y = _kernels.rk4_r_sigma1(sol.r0, p.sigma_a**2, p.sigma_w**2, 1e-3, 990, "numba")
    assert x[1] == y[1] == 990
    np.testing.assert_allclose(x[0], y[0], rtol=1e-14)


def test_rk4_linear1_exact_for_cubic():
    # y' = 3t^2 is integrated exactly by RK4 (Simpson)
    n = 10
    h = 1.0 / n
    th = np.arange(2 * n + 1) * h / 2
    y = _kernels.rk4_linear1(np.zeros_like(th), 3 * th**2, 0.0, h, "numpy")
    np.testing.assert_allclose(y, th[::2] ** 3, atol=1e-15)


def test_rk4_linear2_rotation_fourth_order():
    # (y1, y2)' = (y2, -y1): one full turn returns to (1, 0)
    def err(n):
        h = 2 * np.pi / n
        half = 2 * n + 1
        m = np.zeros((4, half))
        m[1] = 1.0
        m[2] = -1.0
        y = _kernels.rk4_linear2(m, np.zeros((2, half)), np.array([1.0, 0.0]), h, "numpy")
        return np.max(np.abs(y[-1] - [1.0, 0.0]))

    e1, e2 = err(200), err(400)
    assert e2 < 1e-8
    assert 3.8 <= np.log2(e1 / e2) <= 4.2
