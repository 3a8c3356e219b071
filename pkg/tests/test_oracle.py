import numpy as np
import pytest

from constrained_kyle import ModelParams, build_solution
from constrained_kyle import closed_form as cf
from constrained_kyle import oracle


def test_min_steps(sol):
    with pytest.raises(ValueError):
        oracle.integrate_sigma4(sol, 99)


class TestRSigma1:
    def test_stays_admissible(self, sol):
        run = oracle.integrate_r_sigma1(sol.params, sol.r0, 2000)
        r = run.component("r")
        assert r[0] == sol.r0
        assert np.all(r > 0) and np.all(r <= sol.r0)
        assert np.all(run.component("sigma1") > 0)
        assert run.meta["one_sided_end"]
        assert run.grid[-1] <= sol.T - max(1e-6 * sol.T, sol.T / 2000) + 1e-15

    def test_grid_invariants(self, sol):
        run = oracle.integrate_r_sigma1(sol.params, sol.r0, 500)
        assert run.grid[0] == 0 and np.all(np.diff(run.grid) > 0)
        assert np.all(np.isfinite(run.values))

    def test_wrong_r0_blows_up(self, sol):
        # tau is larger than T below the root, smaller above: too large an r0
        # reaches r = 0 before the horizon
        with pytest.raises(oracle.OracleError):
            oracle.integrate_r_sigma1(sol.params, 2.0 * sol.r0, 2000)

    def test_rejects_bad_r0(self, sol):
        with pytest.raises(ValueError):
            oracle.integrate_r_sigma1(sol.params, -1.0, 2000)

    def test_midpoint_against_closed_form(self, sol):
        run = oracle.integrate_r_sigma1(sol.params, sol.r0, 2000)
        assert run.at(0.5, "r") == pytest.approx(cf.r_of_t(sol, 0.5), abs=1e-6)
        assert run.at(0.5, "sigma1") == pytest.approx(cf.sigma1_of_t(sol, 0.5), abs=1e-6)


class TestSigma3:
    def test_initial_and_nonnegative(self, sol):
        run = oracle.integrate_sigma3(sol, 1000)
        s3 = run.component("sigma3")
        assert s3[0] == 0.0 and np.all(s3 >= -1e-12)
        assert run.grid[-1] == pytest.approx(sol.T)

    def test_self_convergence_fourth_order(self, sol):
        coarse, mid, fine = (oracle.integrate_sigma3(sol, n).component("sigma3") for n in (200, 400, 800))
        e1 = np.max(np.abs(coarse - mid[::2]))
        e2 = np.max(np.abs(mid - fine[::2]))
        assert 3.5 <= np.log2(e1 / e2) <= 4.5

    def test_hermite_interpolation(self, sol):
        run = oracle.integrate_sigma3(sol, 200)
        fine = oracle.integrate_sigma3(sol, 4000)
        t = np.linspace(0.01, 0.99, 37)
        np.testing.assert_allclose(run.at(t), fine.at(t), atol=1e-8)


class TestLinearSystems:
    def test_sigma2(self, sol):
        run = oracle.integrate_sigma2(sol, 1000)
        p = sol.params
        assert run.values[0, 0] == p.rho * p.sigma_a * p.sigma_v
        np.testing.assert_allclose(run.component("sigma2"), cf.sigma2_of_t(sol, run.grid), atol=1e-10)

    def test_sigma2_from_oracle_r_sigma1(self, sol):
        run = oracle.integrate_r_sigma1(sol.params, sol.r0, 10_000)
        keep = run.grid <= sol.T - 1e-3
        t, r, s1 = run.grid[keep], run.component("r")[keep], run.component("sigma1")[keep]
        lam = cf.lambda_of_t(sol, t)
        np.testing.assert_allclose(lam * s1 / r, cf.sigma2_of_t(sol, t), atol=1e-5)

    def test_sigma4(self, sol):
        run = oracle.integrate_sigma4(sol, 1000)
        s4 = run.component("sigma4")
        assert s4[0] == sol.params.sigma_v**2
        assert np.all(np.diff(s4) < 0)
        p, r0 = sol.params, sol.r0
        terminal = p.rho**2 * p.sigma_v**2 * np.sqrt(1 + 2 * r0) / (1 + r0) ** 2 + (1 - p.rho**2) * p.sigma_v**2
        assert s4[-1] == pytest.approx(terminal, abs=1e-6)

    def test_fg(self, sol):
        run = oracle.integrate_fg(sol, 2000)
        assert tuple(run.values[0]) == (0.0, 0.0)
        t = run.grid
        np.testing.assert_allclose(run.component("f"), cf.f_of_t(sol, t), atol=1e-6)
        np.testing.assert_allclose(run.component("g"), cf.g_of_t(sol, t), atol=1e-6)

    def test_fg_block_fraction(self, sol):
        run = oracle.integrate_fg(sol, 10_000)
        # f keeps moving right up to T; compare at the last node with the closed form there
        assert 1 - run.component("f")[-1] == pytest.approx(1 - cf.f_of_t(sol, run.grid[-1]), abs=1e-9)
        assert 1 - cf.f_of_t(sol, sol.T) == pytest.approx(cf.block_fraction(sol), abs=1e-12)

    def test_fprime_u_shape_from_oracle(self, sol):
        from constrained_kyle.analysis import detect_u_shape
        run = oracle.integrate_fg(sol, 2000)
        fprime = np.gradient(run.component("f"), run.grid)
        assert detect_u_shape(fprime[5:-5], run.grid[5:-5]).is_u

    def test_K(self, sol):
        run = oracle.integrate_K(sol, 400)
        assert run.values[-1, 0] == 0.0
        assert run.values[0, 0] == pytest.approx(cf.K_of_t(sol, 0.0), abs=1e-8)


@pytest.mark.parametrize("sigma_a", [1.0, 3.0, 5.0])
def test_equivalence_at_1e5_steps(sigma_a):
    sol = build_solution(ModelParams(sigma_a=sigma_a))
    gaps = oracle.oracle_gaps(sol, 100_000)
    assert set(gaps) == {"r", "sigma1", "sigma2", "sigma4", "f", "g", "K"}
    assert max(gaps.values()) <= 1e-6


def test_convergence_orders(fig_sol):
    orders = oracle.convergence_orders(fig_sol)
    for system, conv in orders.items():
        assert conv.observable, system
        assert all(3.5 <= q <= 4.5 for q in conv.orders), (system, conv)


def test_unobservable_order_reported(monkeypatch, sol):
    monkeypatch.setitem(oracle.ROUNDOFF_FLOOR, False, 1.0)
    conv = oracle.convergence_orders(sol)["sigma4"]
    assert not conv.observable and conv.orders == ()


@pytest.mark.parametrize("fn", [oracle.integrate_sigma3, oracle.integrate_sigma4, oracle.integrate_fg,
                                oracle.integrate_K])
def test_backends_agree(sol, fn):
    a = fn(sol, 500, backend="numpy").values
    b = fn(sol, 500, backend="numba").values
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)
