"""Wealth simulation, expected-utility functionals, and slope certificates.

The wealth SDE under a proportional feedback strategy (invest a(t,i)x,
consume b(t,i)x) is linear, so the exact scheme integrates it in log space:
log X gains int (r + mu a - b - sigma^2 a^2 / 2) ds + sigma a dW over each
constant-state segment, which keeps wealth strictly positive. The Euler
scheme applies the raw increment and flags paths that go nonpositive.

The expected-utility functional discounts the whole remaining horizon at the
rate rho_i of the state occupied at the evaluation time, even after the chain
moves. Its deterministic counterpart is the frozen-discount Feynman-Kac
table: one coupled linear ODE solve per frozen rate, read at the matching
row. The slope certificate perturbs a strategy on a shrinking window
[t, t + eps], prices both strategies with that oracle, and Richardson
extrapolates the first-order utility deficit to eps -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rsmerton.core_model import (
    MarketSpec,
    PiecewiseCoefficients,
    coefficients_at,
    utility,
    validate_spec,
)
from rsmerton.ctmc import (
    DIFFUSION_SUBSTREAM,
    JumpPath,
    RngSpec,
    iter_cells,
    sample_skeletons,
)
from rsmerton.equilibrium import EquilibriumSolution, solve, solve_market_ode
from rsmerton.ode_engine import (
    SolutionTable,
    interp_by_state,
    merge_breakpoints,
)
from rsmerton.reporting import MCReport

DEFAULT_PATH_GRID = 2048
# Relative window lengths used for the Richardson extrapolation of slopes.
SLOPE_EPSILONS = (0.1, 0.05, 0.025)


@dataclass(frozen=True)
class ProportionalStrategy:
    """Feedback strategy proportional to wealth: tables of a(t,i) and b(t,i).

    invest_frac is the risky fraction pi/x (dimensionless), consume_frac the
    consumption rate c/x (1/year, nonnegative). Values are interpolated
    linearly in t between grid nodes.
    """

    grid: np.ndarray
    invest_frac: np.ndarray  # (n_nodes, S)
    consume_frac: np.ndarray  # (n_nodes, S)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        a = np.asarray(self.invest_frac, dtype=float)
        b = np.asarray(self.consume_frac, dtype=float)
        if not (np.diff(g) > 0).all():
            raise ValueError("strategy grid must be strictly increasing")
        if a.shape != b.shape or a.shape[0] != g.size:
            raise ValueError("strategy tables must be (n_nodes, S) matching the grid")
        if not np.isfinite(a).all() or not np.isfinite(b).all():
            raise ValueError("strategy tables must be finite")
        if (b < 0).any():
            raise ValueError("consumption fraction must be nonnegative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "invest_frac", a)
        object.__setattr__(self, "consume_frac", b)
        d = np.diff(g)
        uniform = np.allclose(d, d[0], rtol=0, atol=1e-12 * max(d[0], 1.0))
        object.__setattr__(self, "_uniform_step", float(d[0]) if uniform else None)

    @property
    def n_states(self) -> int:
        return self.invest_frac.shape[1]

    @classmethod
    def from_constants(
        cls, invest, consume, horizon: float, n_states: int | None = None
    ) -> "ProportionalStrategy":
        a = np.atleast_1d(np.asarray(invest, dtype=float))
        b = np.atleast_1d(np.asarray(consume, dtype=float))
        S = n_states or max(a.size, b.size)
        a = np.broadcast_to(a, (S,))
        b = np.broadcast_to(b, (S,))
        grid = np.array([0.0, horizon])
        return cls(grid, np.tile(a, (2, 1)), np.tile(b, (2, 1)))

    @classmethod
    def from_policy(cls, solution: EquilibriumSolution) -> "ProportionalStrategy":
        """Tabulate the solved feedback policy on its own solve grid."""
        spec = solution.spec
        table = solution.g_table if solution.branch == "power" else solution.h_table
        grid = table.grid
        gamma = spec.gamma if solution.branch == "power" else 0.0
        a = np.empty((grid.size, spec.states))
        for k, t in enumerate(grid):
            _, mu, sigma = coefficients_at(spec, float(t), solution.coeffs)
            a[k] = mu / (sigma**2 * (1.0 - gamma))
        if solution.branch == "power":
            b = np.power(table.values, 1.0 / (gamma - 1.0))
        else:
            b = 1.0 / table.values
        return cls(grid, a, b)

    def values_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-state (a, b) vectors at time t."""
        g = self.grid
        # uniform grids take the direct-index path; solver stages hit this a lot
        step = self._uniform_step
        if step is not None:
            pos = (t - g[0]) / step
            k = min(max(int(pos), 0), g.size - 2)
            w = min(max(pos - k, 0.0), 1.0)
            a = self.invest_frac[k] + (self.invest_frac[k + 1] - self.invest_frac[k]) * w
            b = self.consume_frac[k] + (self.consume_frac[k + 1] - self.consume_frac[k]) * w
            return a, b
        a = np.array([np.interp(t, g, self.invest_frac[:, j]) for j in range(self.n_states)])
        b = np.array([np.interp(t, g, self.consume_frac[:, j]) for j in range(self.n_states)])
        return a, b

    def scaled(self, invest: float = 1.0, consume: float = 1.0) -> "ProportionalStrategy":
        return replace(
            self,
            invest_frac=self.invest_frac * invest,
            consume_frac=self.consume_frac * consume,
        )

    def min_consumption(self) -> float:
        return float(self.consume_frac.min())


def _utility_domain_check(strategy: ProportionalStrategy, spec: MarketSpec):
    needs_positive = spec.prefs.is_log or spec.gamma < 0
    if needs_positive and strategy.min_consumption() <= 0.0:
        raise ValueError(
            "running utility diverges: consumption fraction must be positive "
            "for log or negative-power preferences"
        )


def _cumulative_tables(strategy: ProportionalStrategy, spec: MarketSpec, coeffs):
    """Exact per-state running integrals of the log-wealth drift and variance.

    Market coefficients are constant on each cell of the merged grid (override
    breakpoints are nodes) and the strategy is piecewise linear on it, so the
    cell integrals of r + mu a - b - sigma^2 a^2 / 2 and of sigma^2 a^2 are
    closed forms: linear terms by trapezoid, the a^2 term by the exact
    quadratic rule.
    """
    bp = None if coeffs is None else coeffs.breakpoints
    tg = merge_breakpoints(strategy.grid, bp)
    S = strategy.n_states
    a_tab = np.stack([np.interp(tg, strategy.grid, strategy.invest_frac[:, j]) for j in range(S)], axis=1)
    b_tab = np.stack([np.interp(tg, strategy.grid, strategy.consume_frac[:, j]) for j in range(S)], axis=1)
    mids = 0.5 * (tg[:-1] + tg[1:])
    r_c = np.empty((mids.size, S))
    mu_c = np.empty_like(r_c)
    s2_c = np.empty_like(r_c)
    for k, t in enumerate(mids):
        r, mu, sigma = coefficients_at(spec, float(t), coeffs)
        r_c[k], mu_c[k], s2_c[k] = r, mu, sigma**2
    dt = np.diff(tg)[:, None]
    a_lo, a_hi = a_tab[:-1], a_tab[1:]
    b_lo, b_hi = b_tab[:-1], b_tab[1:]
    int_a = 0.5 * (a_lo + a_hi) * dt
    int_b = 0.5 * (b_lo + b_hi) * dt
    int_a2 = (a_lo**2 + a_lo * a_hi + a_hi**2) / 3.0 * dt
    inc_d = r_c * dt + mu_c * int_a - int_b - 0.5 * s2_c * int_a2
    inc_v = s2_c * int_a2
    cd = np.vstack([np.zeros((1, S)), np.cumsum(inc_d, axis=0)])
    cv = np.vstack([np.zeros((1, S)), np.cumsum(inc_v, axis=0)])
    return tg, cd, cv, a_tab, b_tab


@dataclass(frozen=True)
class WealthPath:
    """Simulated wealth along one chain trajectory on a merged time grid."""

    grid: np.ndarray
    wealth: np.ndarray
    path: JumpPath
    scheme: str
    valid: bool
    first_invalid: int | None
    seed: int
    stream: int

    def to_csv(self) -> str:
        """Rows (t, wealth, state) for inspection."""
        states = self.path.state_at(self.grid)
        lines = ["t,wealth,state"]
        for t, w, s in zip(self.grid, self.wealth, states):
            lines.append(f"{t:.12g},{w:.12g},{int(s)}")
        return "\n".join(lines) + "\n"


def simulate_wealth(
    strategy: ProportionalStrategy,
    x0: float,
    path: JumpPath,
    spec: MarketSpec,
    n_grid: int,
    rng: RngSpec,
    scheme: str = "exact",
    coeffs: PiecewiseCoefficients | None = None,
) -> WealthPath:
    """Integrate the wealth SDE along one chain path.

    The time grid is uniform with the path's jump times inserted as
    breakpoints. The exact scheme accumulates log-wealth segment integrals
    (wealth stays positive); the Euler scheme applies raw increments and
    flags the first node where wealth is nonpositive. Both schemes consume
    one normal draw per segment in the same order, so they can be compared
    on the same driving noise.
    """
    if x0 <= 0:
        raise ValueError("initial wealth must be positive")
    if scheme not in ("exact", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    validate_spec(spec)
    T = spec.horizon
    grid = np.unique(np.concatenate([np.linspace(0.0, T, n_grid + 1), path.jump_times]))
    tg, cd, cv, a_tab, b_tab = _cumulative_tables(strategy, spec, coeffs)
    lo, hi = grid[:-1], grid[1:]
    states = path.state_at(lo)  # constant on each segment by construction
    z = rng.generator(DIFFUSION_SUBSTREAM).standard_normal(lo.size)
    dW = np.sqrt(hi - lo) * z
    if scheme == "exact":
        d_seg = interp_by_state(tg, cd, hi, states) - interp_by_state(tg, cd, lo, states)
        v_seg = np.clip(
            interp_by_state(tg, cv, hi, states) - interp_by_state(tg, cv, lo, states), 0.0, None
        )
        log_x = np.log(x0) + np.concatenate([[0.0], np.cumsum(d_seg + np.sqrt(v_seg) * z)])
        wealth = np.exp(log_x)
        return WealthPath(grid, wealth, path, scheme, True, None, rng.seed, rng.stream)
    # Euler: point-evaluated coefficients at segment left ends
    a_lo = interp_by_state(tg, a_tab, lo, states)
    b_lo = interp_by_state(tg, b_tab, lo, states)
    r_lo = np.empty_like(lo)
    mu_lo = np.empty_like(lo)
    s_lo = np.empty_like(lo)
    for k in range(lo.size):
        r, mu, sigma = coefficients_at(spec, float(lo[k]), coeffs)
        s = int(states[k])
        r_lo[k], mu_lo[k], s_lo[k] = r[s], mu[s], sigma[s]
    factors = 1.0 + (r_lo + mu_lo * a_lo - b_lo) * (hi - lo) + s_lo * a_lo * dW
    wealth = x0 * np.concatenate([[1.0], np.cumprod(factors)])
    bad = np.nonzero(wealth <= 0.0)[0]
    first_bad = int(bad[0]) if bad.size else None
    return WealthPath(
        grid, wealth, path, scheme, first_bad is None, first_bad, rng.seed, rng.stream
    )


def estimate_J(
    strategy: ProportionalStrategy,
    t: float,
    x: float,
    i: int,
    spec: MarketSpec,
    n_paths: int,
    rng: RngSpec,
    n_grid: int = DEFAULT_PATH_GRID,
    coeffs: PiecewiseCoefficients | None = None,
    target: float | None = None,
) -> MCReport:
    """Monte-Carlo estimate of the expected-utility functional.

    Estimates E[int_t^T e^{-rho_i (s-t)} U(c(s)) ds + e^{-rho_i (T-t)} U(X_T)]
    from (t, x, i), with the discount rate frozen at the queried state's
    rho_i. Paths use the exact log-space scheme; the running utility is
    integrated by trapezoid on the uniform grid.
    """
    validate_spec(spec)
    if x <= 0:
        raise ValueError("wealth must be positive")
    if not 0.0 <= t <= spec.horizon:
        raise ValueError(f"t={t} outside [0, {spec.horizon}]")
    prefs = spec.prefs
    if t >= spec.horizon:
        u = float(utility(x, prefs))
        return MCReport(
            estimate=u, stderr=0.0, n_paths=n_paths, algorithm=rng.algorithm,
            seed=rng.seed, stream=rng.stream, target=target,
            z_score=None if target is None else (0.0 if u == target else float("inf")),
        )
    _utility_domain_check(strategy, spec)
    T = spec.horizon
    rho_i = spec.rho[i]
    gamma = spec.gamma
    skel = sample_skeletons(spec.generator, i, t, T, n_paths, rng)
    zgen = rng.generator(DIFFUSION_SUBSTREAM)
    edges = np.linspace(t, T, n_grid + 1)
    tg, cd, cv, _a_tab, b_tab = _cumulative_tables(strategy, spec, coeffs)
    S = spec.states
    cd_edges = np.stack([np.interp(edges, tg, cd[:, j]) for j in range(S)], axis=1)
    cv_edges = np.stack([np.interp(edges, tg, cv[:, j]) for j in range(S)], axis=1)
    b_edges = np.stack([np.interp(edges, tg, b_tab[:, j]) for j in range(S)], axis=1)
    disc = np.exp(-rho_i * (edges - t))

    def flow(b_vals, log_wealth, k):
        # e^{-rho_i (s-t)} U(b X) evaluated stably in log space
        if prefs.is_log:
            return disc[k] * (np.log(b_vals * x) + log_wealth)
        return disc[k] * np.exp(gamma * (np.log(b_vals * x) + log_wealth)) / gamma

    log_x = np.zeros(n_paths)
    quad = np.zeros(n_paths)
    f_prev = flow(np.full(n_paths, b_edges[0, i]), log_x, 0)
    for k, entry, exit_, corr in iter_cells(skel, edges):
        d_cell = cd_edges[k + 1, entry] - cd_edges[k, entry]
        v_cell = cv_edges[k + 1, entry] - cv_edges[k, entry]
        if corr is not None:
            sub, rounds = corr
            d_sub = np.zeros(sub.size)
            v_sub = np.zeros(sub.size)
            for seg_lo, seg_hi, seg_state in rounds:
                d_sub += interp_by_state(tg, cd, seg_hi, seg_state) - interp_by_state(
                    tg, cd, seg_lo, seg_state
                )
                v_sub += interp_by_state(tg, cv, seg_hi, seg_state) - interp_by_state(
                    tg, cv, seg_lo, seg_state
                )
            d_cell[sub] = d_sub
            v_cell[sub] = v_sub
        z = zgen.standard_normal(n_paths)
        log_x = log_x + d_cell + np.sqrt(np.clip(v_cell, 0.0, None)) * z
        f_now = flow(b_edges[k + 1, exit_], log_x, k + 1)
        quad += 0.5 * (f_prev + f_now) * (edges[k + 1] - edges[k])
        f_prev = f_now
    if prefs.is_log:
        terminal = disc[-1] * (np.log(x) + log_x)
    else:
        terminal = disc[-1] * np.exp(gamma * (np.log(x) + log_x)) / gamma
    return MCReport.from_samples(quad + terminal, rng, target=target)


def sample_terminal_wealth(
    strategy: ProportionalStrategy,
    x0: float,
    i: int,
    spec: MarketSpec,
    n_paths: int,
    rng: RngSpec,
    n_grid: int = DEFAULT_PATH_GRID,
    coeffs: PiecewiseCoefficients | None = None,
) -> np.ndarray:
    """Terminal wealth X(T) for an ensemble started at (0, x0, i), exact scheme."""
    validate_spec(spec)
    if x0 <= 0:
        raise ValueError("initial wealth must be positive")
    T = spec.horizon
    skel = sample_skeletons(spec.generator, i, 0.0, T, n_paths, rng)
    zgen = rng.generator(DIFFUSION_SUBSTREAM)
    edges = np.linspace(0.0, T, n_grid + 1)
    tg, cd, cv, _a_tab, _b_tab = _cumulative_tables(strategy, spec, coeffs)
    S = spec.states
    cd_edges = np.stack([np.interp(edges, tg, cd[:, j]) for j in range(S)], axis=1)
    cv_edges = np.stack([np.interp(edges, tg, cv[:, j]) for j in range(S)], axis=1)
    log_x = np.full(n_paths, np.log(x0))
    for k, entry, _exit, corr in iter_cells(skel, edges):
        d_cell = cd_edges[k + 1, entry] - cd_edges[k, entry]
        v_cell = cv_edges[k + 1, entry] - cv_edges[k, entry]
        if corr is not None:
            sub, rounds = corr
            d_sub = np.zeros(sub.size)
            v_sub = np.zeros(sub.size)
            for seg_lo, seg_hi, seg_state in rounds:
                d_sub += interp_by_state(tg, cd, seg_hi, seg_state) - interp_by_state(
                    tg, cd, seg_lo, seg_state
                )
                v_sub += interp_by_state(tg, cv, seg_hi, seg_state) - interp_by_state(
                    tg, cv, seg_lo, seg_state
                )
            d_cell[sub] = d_sub
            v_cell[sub] = v_sub
        z = zgen.standard_normal(n_paths)
        log_x = log_x + d_cell + np.sqrt(np.clip(v_cell, 0.0, None)) * z
    return np.exp(log_x)


@dataclass(frozen=True)
class FrozenValueTable:
    """Deterministic value of a proportional strategy under a frozen discount rate.

    Power branch: J(t, x, row) = f(t, row) x^gamma / gamma. Log branch:
    J = h(t, row) log x + l(t, row). The functional J(t, x, i) of the
    state-rho_i discount convention is read at row i from the table computed
    with frozen_rho = rho_i.
    """

    branch: str
    frozen_rho: float
    gamma: float
    f_table: SolutionTable | None = None
    h_table: SolutionTable | None = None
    l_table: SolutionTable | None = None

    @property
    def table(self) -> SolutionTable:
        return self.f_table if self.branch == "power" else self.h_table

    def value(self, t: float, x: float, row: int) -> float:
        if x <= 0:
            raise ValueError("wealth must be positive")
        if self.branch == "power":
            return float(self.f_table.component(t, row) * x**self.gamma / self.gamma)
        return float(self.h_table.component(t, row) * np.log(x) + self.l_table.component(t, row))


def _fk_rhs_factory(strategy: ProportionalStrategy, frozen_rho: float, spec: MarketSpec):
    """Leg-wise right-hand side of the frozen-discount value system."""
    S = spec.states
    rates = spec.generator.rates
    gamma = spec.gamma
    if spec.prefs.is_log:

        def make_rhs(r, mu, sigma):
            def rhs(t, y):
                h, low = y[:S], y[S:]
                a, b = strategy.values_at(t)
                dh = -(1.0 - frozen_rho * h + rates @ h)
                dl = -(
                    (r + mu * a - b - 0.5 * sigma**2 * a**2) * h
                    + np.log(b)
                    - frozen_rho * low
                    + rates @ low
                )
                return np.concatenate([dh, dl])

            return rhs

        return make_rhs

    def make_rhs(r, mu, sigma):
        def rhs(t, f):
            a, b = strategy.values_at(t)
            coef = gamma * (r + mu * a - b) + 0.5 * gamma * (gamma - 1.0) * sigma**2 * a**2
            return -((coef - frozen_rho) * f + rates @ f + np.power(b, gamma))

        return rhs

    return make_rhs


def _fk_terminal(spec: MarketSpec) -> np.ndarray:
    S = spec.states
    if spec.prefs.is_log:
        return np.concatenate([np.ones(S), np.zeros(S)])
    return np.ones(S)


def feynman_kac_value(
    strategy: ProportionalStrategy,
    frozen_rho: float,
    spec: MarketSpec,
    n_steps: int = 2048,
    coeffs: PiecewiseCoefficients | None = None,
) -> FrozenValueTable:
    """Solve the frozen-discount value system of a proportional strategy.

    Power branch: df/dt + [gamma(r + mu a - b) + gamma(gamma-1) sigma^2 a^2/2
    - frozen_rho] f + sum_j rates[i,j] f(., j) + b^gamma = 0, f(T, .) = 1.
    The log branch solves the (h, l) analogue with h(T)=1, l(T)=0.
    """
    validate_spec(spec)
    _utility_domain_check(strategy, spec)
    S = spec.states
    table = solve_market_ode(
        _fk_rhs_factory(strategy, frozen_rho, spec), spec, coeffs,
        _fk_terminal(spec), n_steps, tol=None,
    )
    if spec.prefs.is_log:
        return FrozenValueTable(
            branch="log", frozen_rho=frozen_rho, gamma=0.0,
            h_table=SolutionTable(table.grid, table.values[:, :S]),
            l_table=SolutionTable(table.grid, table.values[:, S:]),
        )
    return FrozenValueTable(
        branch="power", frozen_rho=frozen_rho, gamma=spec.gamma, f_table=table
    )


@dataclass(frozen=True)
class SlopeResult:
    """First-order utility deficit of a window perturbation, extrapolated to zero width."""

    t: float
    state: int
    x: float
    epsilons: np.ndarray
    slopes: np.ndarray
    extrapolated: float


class SlopeOracle:
    """Prices window perturbations of a solved policy with the frozen oracle.

    The tail solve on [t + eps, T] and the unperturbed window value depend
    only on (state, t, eps), so they are cached and shared across a whole
    perturbation menu.
    """

    def __init__(
        self,
        spec: MarketSpec,
        solution: EquilibriumSolution | None = None,
        coeffs: PiecewiseCoefficients | None = None,
        n_steps_tail: int = 2048,
        n_steps_window: int = 256,
    ):
        validate_spec(spec)
        self.spec = spec
        self.coeffs = coeffs
        self.solution = solution if solution is not None else solve(spec, coeffs=coeffs)
        self.base = ProportionalStrategy.from_policy(self.solution)
        self.n_steps_tail = n_steps_tail
        self.n_steps_window = n_steps_window
        S = spec.states
        self._terminal = (
            np.concatenate([np.ones(S), np.zeros(S)]) if spec.prefs.is_log else np.ones(S)
        )
        self._tails: dict = {}
        self._eq_windows: dict = {}

    def _boundary(self, i: int, t_hi: float) -> np.ndarray:
        key = (i, t_hi)
        if key not in self._tails:
            if t_hi >= self.spec.horizon:
                self._tails[key] = self._terminal
            else:
                table = solve_market_ode(
                    _fk_rhs_factory(self.base, float(self.spec.rho[i]), self.spec),
                    self.spec, self.coeffs, self._terminal, self.n_steps_tail,
                    tol=None, t_start=t_hi,
                )
                self._tails[key] = table.values[0]
        return self._tails[key]

    def _window_f0(self, strategy, t: float, i: int, eps: float) -> np.ndarray:
        boundary = self._boundary(i, t + eps)
        table = solve_market_ode(
            _fk_rhs_factory(strategy, float(self.spec.rho[i]), self.spec),
            self.spec, self.coeffs, boundary, self.n_steps_window,
            tol=None, t_start=t, horizon=t + eps,
        )
        return table.values[0]

    def _value(self, f0: np.ndarray, x: float, i: int) -> float:
        spec = self.spec
        if spec.prefs.is_log:
            return float(f0[i] * np.log(x) + f0[spec.states + i])
        return float(f0[i] * x**spec.gamma / spec.gamma)

    def slope(
        self,
        t: float,
        x: float,
        i: int,
        perturbation: ProportionalStrategy,
        epsilons=None,
    ) -> SlopeResult:
        T = self.spec.horizon
        if not 0.0 <= t < T:
            raise ValueError(f"t={t} must lie in [0, T)")
        if epsilons is None:
            epsilons = np.array(SLOPE_EPSILONS) * (T - t)
        epsilons = np.asarray(sorted(epsilons, reverse=True), dtype=float)
        if (epsilons <= 0).any() or (epsilons > T - t).any():
            raise ValueError("window widths must lie in (0, T - t]")
        slopes = []
        for eps in epsilons:
            key = (i, t, eps)
            if key not in self._eq_windows:
                self._eq_windows[key] = self._window_f0(self.base, t, i, eps)
            j_eq = self._value(self._eq_windows[key], x, i)
            j_pert = self._value(self._window_f0(perturbation, t, i, eps), x, i)
            slopes.append((j_eq - j_pert) / eps)
        slopes = np.asarray(slopes)
        if epsilons.size >= 2:
            A = np.vstack([np.ones_like(epsilons), epsilons]).T
            coef, *_ = np.linalg.lstsq(A, slopes, rcond=None)
            extrapolated = float(coef[0])
        else:
            extrapolated = float(slopes[0])
        return SlopeResult(
            t=t, state=i, x=x, epsilons=epsilons, slopes=slopes, extrapolated=extrapolated
        )


def equilibrium_slope(
    spec: MarketSpec,
    t: float,
    x: float,
    i: int,
    perturbation: ProportionalStrategy,
    epsilons=None,
    solution: EquilibriumSolution | None = None,
    coeffs: PiecewiseCoefficients | None = None,
    n_steps_tail: int = 2048,
    n_steps_window: int = 256,
) -> SlopeResult:
    """Richardson-extrapolated slope [J(policy) - J(spliced)] / eps as eps -> 0.

    The spliced strategy equals the perturbation on [t, t + eps] and the
    solved feedback policy elsewhere. Both functionals are priced with the
    deterministic frozen-discount oracle (discount rho_i), solved in two
    legs so the splice point is a grid boundary, never an interior kink.
    """
    oracle = SlopeOracle(
        spec, solution=solution, coeffs=coeffs,
        n_steps_tail=n_steps_tail, n_steps_window=n_steps_window,
    )
    return oracle.slope(t, x, i, perturbation, epsilons=epsilons)


def perturbation_menu(solution: EquilibriumSolution) -> dict[str, ProportionalStrategy]:
    """The six bounded perturbations used by the slope certificate."""
    base = ProportionalStrategy.from_policy(solution)
    return {
        "consumption_x2": base.scaled(consume=2.0),
        "consumption_half": base.scaled(consume=0.5),
        "investment_zero": base.scaled(invest=0.0),
        "investment_x2": base.scaled(invest=2.0),
        "both_x2": base.scaled(invest=2.0, consume=2.0),
        "investment_flip": base.scaled(invest=-1.0),
    }
