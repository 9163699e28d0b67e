import numpy as np
import pytest
from scipy.integrate import quad

from rsmerton.ctmc import JumpPath, RngSpec, sample_path
from rsmerton.equilibrium import merton_closed_form, solve_g, solve_log
from rsmerton.ode_engine import OdeSystem, rk4_solve
from rsmerton.simulate import (
    ProportionalStrategy,
    equilibrium_slope,
    estimate_J,
    feynman_kac_value,
    perturbation_menu,
    sample_terminal_wealth,
    simulate_wealth,
)
from tests.conftest import make_spec


def no_jump_path(horizon=1.0, state=0):
    return JumpPath(state, np.array([]), np.array([], dtype=np.int64), horizon)


class TestProportionalStrategy:
    def test_from_constants_broadcasts(self):
        s = ProportionalStrategy.from_constants(0.5, 0.1, horizon=1.0, n_states=3)
        assert s.invest_frac.shape == (2, 3)
        a, b = s.values_at(0.7)
        np.testing.assert_allclose(a, 0.5)
        np.testing.assert_allclose(b, 0.1)

    def test_from_policy_matches_solution(self, bench_spec):
        sol = solve_g(bench_spec)
        s = ProportionalStrategy.from_policy(sol)
        assert s.grid.size == sol.g_table.grid.size
        np.testing.assert_allclose(
            s.consume_frac[0], sol.consumption_curve().rates[0], atol=1e-14
        )
        np.testing.assert_allclose(s.invest_frac[:, 0], 0.15 / (0.0625 * 2.0))

    def test_negative_consumption_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            ProportionalStrategy.from_constants(0.0, -0.1, horizon=1.0, n_states=2)

    def test_scaled(self):
        s = ProportionalStrategy.from_constants(1.0, 0.4, horizon=1.0, n_states=2)
        s2 = s.scaled(invest=-1.0, consume=2.0)
        np.testing.assert_allclose(s2.invest_frac, -1.0)
        np.testing.assert_allclose(s2.consume_frac, 0.8)


class TestSimulateWealth:
    def test_deterministic_growth_exact(self):
        # No risky holdings, no consumption, no jumps: X(T) = x0 e^{rT} exactly.
        spec = make_spec(mu=0.0, r=0.05, generator=[[0.0, 0.0], [0.0, 0.0]])
        strat = ProportionalStrategy.from_constants(0.0, 0.0, 1.0, n_states=2)
        wp = simulate_wealth(strat, 2.0, no_jump_path(), spec, 64, RngSpec(seed=1))
        assert wp.wealth[-1] == pytest.approx(2.0 * np.exp(0.05), rel=1e-14)
        assert wp.valid

    def test_jump_times_are_grid_breakpoints(self, bench_spec):
        path = JumpPath(0, np.array([0.123456]), np.array([1]), 1.0)
        strat = ProportionalStrategy.from_constants(0.5, 0.3, 1.0, n_states=2)
        wp = simulate_wealth(strat, 1.0, path, bench_spec, 16, RngSpec(seed=2))
        assert 0.123456 in wp.grid

    def test_exact_scheme_keeps_wealth_positive(self, bench_spec):
        strat = ProportionalStrategy.from_constants(2.0, 5.0, 1.0, n_states=2)
        for stream in range(10):
            p = sample_path(bench_spec.generator, 0, 1.0, RngSpec(seed=3, stream=stream))
            wp = simulate_wealth(strat, 1.0, p, bench_spec, 128, RngSpec(seed=3, stream=stream))
            assert (wp.wealth > 0).all()
            assert wp.valid

    def test_euler_flags_nonpositive_wealth(self):
        spec = make_spec(mu=0.0, r=0.05, generator=[[0.0, 0.0], [0.0, 0.0]])
        strat = ProportionalStrategy.from_constants(0.0, 50.0, 1.0, n_states=2)
        wp = simulate_wealth(
            strat, 1.0, no_jump_path(), spec, 8, RngSpec(seed=4), scheme="euler"
        )
        assert not wp.valid
        assert wp.first_invalid == 1

    def test_reproducible(self, bench_spec):
        strat = ProportionalStrategy.from_constants(1.0, 0.5, 1.0, n_states=2)
        p = sample_path(bench_spec.generator, 0, 1.0, RngSpec(seed=5))
        a = simulate_wealth(strat, 1.0, p, bench_spec, 64, RngSpec(seed=5))
        b = simulate_wealth(strat, 1.0, p, bench_spec, 64, RngSpec(seed=5))
        np.testing.assert_array_equal(a.wealth, b.wealth)

    def test_euler_strong_order_one_half(self):
        # Deviation between Euler and the exact scheme on the same driving
        # noise shrinks like the square root of the step count (the measured
        # per-doubling ratio is about 0.71, not 0.5).
        spec = make_spec(mu=0.15, r=0.05, generator=[[0.0, 0.0], [0.0, 0.0]])
        strat = ProportionalStrategy.from_constants(1.2, 0.7, 1.0, n_states=2)
        ns = np.array([64, 128, 256, 512])
        devs = []
        for n in ns:
            acc = 0.0
            for stream in range(200):
                rng = RngSpec(seed=6, stream=stream)
                we = simulate_wealth(strat, 1.0, no_jump_path(), spec, n, rng, "euler")
                wx = simulate_wealth(strat, 1.0, no_jump_path(), spec, n, rng, "exact")
                acc += np.abs(we.wealth - wx.wealth).max()
            devs.append(acc / 200)
        slope = np.polyfit(np.log(ns), np.log(devs), 1)[0]
        assert -0.65 <= slope <= -0.35

    def test_unknown_scheme_rejected(self, bench_spec):
        strat = ProportionalStrategy.from_constants(0.0, 0.0, 1.0, n_states=2)
        with pytest.raises(ValueError, match="scheme"):
            simulate_wealth(strat, 1.0, no_jump_path(), bench_spec, 8, RngSpec(seed=1), "milstein")


class TestTerminalWealthEnsemble:
    def test_mean_matches_first_moment_system(self, bench_spec):
        # E[X(T)] from the ensemble vs the forward moment equations
        # m_i' = (r_i + mu_i a_i - b_i(t)) m_i + sum_j rates[j,i] m_j,
        # solved by time reversal with the same integrator.
        sol = solve_g(bench_spec)
        strat = ProportionalStrategy.from_policy(sol)
        spec = bench_spec
        T = spec.horizon
        a0 = strat.invest_frac[0]

        def forward_rhs(t, m):
            _, b = strat.values_at(t)
            growth = spec.r + spec.mu * a0 - b
            return growth * m + spec.generator.rates.T @ m

        reversed_sys = OdeSystem(
            dimension=2,
            rhs=lambda t, y: -forward_rhs(T - t, y),
            terminal_values=np.array([1.0, 0.0]),  # X(0)=1, started in state 0
            horizon=T,
        )
        m_T = rk4_solve(reversed_sys, 2048).values[0]
        ref = m_T.sum()
        xt = sample_terminal_wealth(strat, 1.0, 0, spec, 100_000, RngSpec(seed=8))
        se = xt.std(ddof=1) / np.sqrt(xt.size)
        assert abs(xt.mean() - ref) <= 3 * se

    def test_all_terminal_wealth_positive(self, bench_spec):
        sol = solve_g(bench_spec)
        strat = ProportionalStrategy.from_policy(sol)
        xt = sample_terminal_wealth(strat, 1.0, 1, bench_spec, 5000, RngSpec(seed=9))
        assert (xt > 0).all()


class TestEstimateJ:
    def test_at_horizon_returns_utility_with_zero_variance(self, bench_spec):
        strat = ProportionalStrategy.from_constants(0.5, 0.5, 1.0, n_states=2)
        rep = estimate_J(strat, 1.0, 2.0, 0, bench_spec, 1000, RngSpec(seed=1))
        assert rep.estimate == pytest.approx(2.0**-1 / -1.0)
        assert rep.stderr == 0.0

    def test_deterministic_reduction_matches_quadrature(self):
        # State-independent market, no risky holdings, constant consumption:
        # wealth is deterministic and the functional reduces to a plain
        # integral, evaluated independently with adaptive quadrature.
        spec = make_spec(gamma=-1.0, mu=0.0, r=0.05, rho=(0.3, 0.3))
        b = 0.8
        strat = ProportionalStrategy.from_constants(0.0, b, 1.0, n_states=2)

        def integrand(s):
            x_s = np.exp((0.05 - b) * s)
            return np.exp(-0.3 * s) * (-1.0 / (b * x_s))

        ref = quad(integrand, 0.0, 1.0, epsabs=1e-12)[0] + np.exp(-0.3) * (
            -np.exp(-(0.05 - b))
        )
        rep = estimate_J(strat, 0.0, 1.0, 0, spec, 1000, RngSpec(seed=2))
        assert rep.stderr <= 1e-12
        assert rep.estimate == pytest.approx(ref, abs=1e-8)

    def test_matches_frozen_discount_oracle_power(self, bench_spec):
        sol = solve_g(bench_spec)
        strat = ProportionalStrategy.from_policy(sol)
        for i in range(2):
            target = feynman_kac_value(strat, float(bench_spec.rho[i]), bench_spec).value(
                0.0, 1.0, i
            )
            rep = estimate_J(
                strat, 0.0, 1.0, i, bench_spec, 30_000,
                RngSpec(seed=2024, stream=i), n_grid=1024, target=target,
            )
            assert abs(rep.z_score) < 3.0

    def test_matches_frozen_discount_oracle_log(self):
        spec = make_spec(gamma=0.0)
        strat = ProportionalStrategy.from_policy(solve_log(spec))
        for i in range(2):
            target = feynman_kac_value(strat, float(spec.rho[i]), spec).value(0.0, 1.0, i)
            rep = estimate_J(
                strat, 0.0, 1.0, i, spec, 30_000,
                RngSpec(seed=2024, stream=10 + i), n_grid=1024, target=target,
            )
            assert abs(rep.z_score) < 3.0

    def test_utility_domain_error_before_sampling(self, bench_spec):
        strat = ProportionalStrategy.from_constants(0.5, 0.0, 1.0, n_states=2)
        with pytest.raises(ValueError, match="diverges"):
            estimate_J(strat, 0.0, 1.0, 0, bench_spec, 1000, RngSpec(seed=3))


class TestFeynmanKac:
    def test_single_regime_constant_strategy_closed_form(self):
        spec = make_spec(gamma=-1.0, mu=0.15, r=0.05, rho=(0.3, 0.3))
        a, b = 0.9, 0.6
        strat = ProportionalStrategy.from_constants(a, b, 1.0, n_states=2)
        fk = feynman_kac_value(strat, 0.3, spec)
        g = spec.gamma
        k = g * (0.05 + 0.15 * a - b) + 0.5 * g * (g - 1) * 0.0625 * a**2
        kappa = 0.3 - k
        ts = fk.f_table.grid
        ref = b**g / kappa + (1 - b**g / kappa) * np.exp(kappa * (ts - 1.0))
        assert np.abs(fk.f_table.values[:, 0] - ref).max() <= 1e-8

    def test_equilibrium_diagonal_reproduces_g_under_common_discount(self, const_rho_spec):
        # With a single discount rate the policy's frozen-discount value has
        # the solved g as its coefficient, regime coupling and all.
        sol = solve_g(const_rho_spec)
        strat = ProportionalStrategy.from_policy(sol)
        fk = feynman_kac_value(strat, 0.9, const_rho_spec)
        dev = np.abs(fk.f_table.values - sol.g_table.interpolate(fk.f_table.grid))
        assert dev.max() <= 1e-6

    def test_state_symmetric_inputs_give_state_symmetric_table(self):
        spec = make_spec(gamma=-0.5, rho=(0.4, 0.4))
        strat = ProportionalStrategy.from_constants(0.7, 0.5, 1.0, n_states=2)
        fk = feynman_kac_value(strat, 0.4, spec)
        # symmetric up to matmul roundoff (BLAS fused multiply-add)
        np.testing.assert_allclose(
            fk.f_table.values[:, 0], fk.f_table.values[:, 1], rtol=0, atol=1e-12
        )

    def test_reproduces_single_regime_benchmark_value(self, const_rho_spec):
        # Frozen oracle against the closed-form consumption benchmark:
        # the implied coefficient is C(t)^(gamma-1).
        sol = solve_g(const_rho_spec)
        strat = ProportionalStrategy.from_policy(sol)
        fk = feynman_kac_value(strat, 0.9, const_rho_spec)
        ts = fk.f_table.grid
        ref = merton_closed_form(const_rho_spec, ts) ** (const_rho_spec.gamma - 1.0)
        assert np.abs(fk.f_table.values[:, 0] - ref).max() <= 1e-6

    def test_log_wealth_coefficient_is_strategy_free_closed_form(self):
        # For log preferences the coefficient of log x under a frozen
        # discount depends on nothing but the rate and the clock.
        spec = make_spec(gamma=0.0)
        for a, b in ((0.0, 0.3), (1.5, 0.9)):
            strat = ProportionalStrategy.from_constants(a, b, 1.0, n_states=2)
            fk = feynman_kac_value(strat, 0.9, spec)
            ts = fk.h_table.grid
            ref = np.exp(-0.9 * (1.0 - ts)) + (1 - np.exp(-0.9 * (1.0 - ts))) / 0.9
            assert np.abs(fk.h_table.values - ref[:, None]).max() <= 1e-9

    def test_frozen_discount_value_departs_from_ansatz_when_rho_varies(self):
        # With regime-dependent discounting, the frozen-discount value of the
        # solved policy is NOT the ansatz coefficient table: the log-wealth
        # coefficient has a strategy-free closed form, and it sits well below
        # the coupled h in the high-discount regime. See the frozen-discount
        # note in the README.
        spec = make_spec(gamma=0.0)  # rho = (0.9, 0.3)
        sol = solve_log(spec)
        h_coupled = sol.h_table.values[0, 0]
        h_frozen = np.exp(-0.9) + (1 - np.exp(-0.9)) / 0.9
        assert h_coupled - h_frozen > 0.1

    def test_domain_check(self, bench_spec):
        strat = ProportionalStrategy.from_constants(0.5, 0.0, 1.0, n_states=2)
        with pytest.raises(ValueError, match="diverges"):
            feynman_kac_value(strat, 0.9, bench_spec)


class TestEquilibriumSlope:
    def test_identity_perturbation_has_exactly_zero_slope(self, bench_spec):
        sol = solve_g(bench_spec)
        base = ProportionalStrategy.from_policy(sol)
        res = equilibrium_slope(bench_spec, 0.5, 1.0, 0, base, solution=sol)
        assert (res.slopes == 0.0).all()
        assert res.extrapolated == 0.0

    def test_doubled_consumption_slope_nonnegative(self, bench_spec):
        sol = solve_g(bench_spec)
        menu = perturbation_menu(sol)
        res = equilibrium_slope(bench_spec, 0.5, 1.0, 0, menu["consumption_x2"], solution=sol)
        assert res.extrapolated >= -1e-6
        assert res.extrapolated == pytest.approx(0.536644, abs=1e-4)

    def test_zero_investment_slope_nonnegative(self, bench_spec):
        sol = solve_g(bench_spec)
        menu = perturbation_menu(sol)
        for i in range(2):
            res = equilibrium_slope(bench_spec, 0.3, 1.0, i, menu["investment_zero"], solution=sol)
            assert res.extrapolated > 0.0

    def test_slope_scales_homothetically(self, bench_spec):
        sol = solve_g(bench_spec)
        menu = perturbation_menu(sol)
        r1 = equilibrium_slope(bench_spec, 0.5, 1.0, 0, menu["consumption_x2"], solution=sol)
        r2 = equilibrium_slope(bench_spec, 0.5, 2.0, 0, menu["consumption_x2"], solution=sol)
        assert r2.extrapolated == pytest.approx(2.0**bench_spec.gamma * r1.extrapolated, rel=1e-9)

    def test_improving_consumption_direction_exists_for_high_gamma(self):
        # At gamma = 0.7 the menu's halved-consumption perturbation has a
        # strictly negative first-order slope in the low-discount regime:
        # the solved policy's consumption is not a stationary point of the
        # frozen-discount functional there. See the frozen-discount note in
        # the README.
        spec = make_spec(gamma=0.7)
        sol = solve_g(spec)
        menu = perturbation_menu(sol)
        res = equilibrium_slope(spec, 0.25, 1.0, 1, menu["consumption_half"], solution=sol)
        assert res.extrapolated < -0.02
        assert res.extrapolated == pytest.approx(-0.04934, abs=5e-4)

    def test_window_bounds_checked(self, bench_spec):
        sol = solve_g(bench_spec)
        base = ProportionalStrategy.from_policy(sol)
        with pytest.raises(ValueError, match="window widths"):
            equilibrium_slope(
                bench_spec, 0.9, 1.0, 0, base, epsilons=[0.5], solution=sol
            )

    def test_menu_contains_six_perturbations(self, bench_spec):
        menu = perturbation_menu(solve_g(bench_spec))
        assert sorted(menu) == [
            "both_x2",
            "consumption_half",
            "consumption_x2",
            "investment_flip",
            "investment_x2",
            "investment_zero",
        ]
