"""Coupled coefficient systems for the feedback policies, closed forms, Picard oracle.

Power utility: the value ansatz v(t,x,i) = g(t,i) x^gamma / gamma leads to a
coupled nonlinear terminal-value system for g, one component per regime:

    dg/dt(t,i) + [gamma r + mu^2 gamma / (2 sigma^2 (1-gamma)) - rho_i] g(t,i)
        + sum_j rates[i,j] g(t,j) + (1-gamma) g^(gamma/(gamma-1))(t,i) = 0,

with g(T,i) = 1. The feedback maps are linear in wealth: invest
mu x / (sigma^2 (1-gamma)), consume g^(1/(gamma-1)) x.

Log utility: v = h(t,i) log x + l(t,i); h solves the linear system
dh/dt - rho_i h + sum_j rates[i,j] h(.,j) + 1 = 0 with h(T,i) = 1, and l a
linear system fed by h with l(T,i) = 0. Policies: invest mu x / sigma^2,
consume x / h.

The Picard operator of the fixed-point characterization

    g(t,i) = E_t^i[K(T)] + (1-gamma) E_t^i int_t^T K(v) g^(gamma/(gamma-1))(v,J_v) dv,
    K(v) = exp{ int_t^v [gamma r + mu^2 gamma/(2 sigma^2 (1-gamma)) - rho_J(u)] du }

is implemented by Monte-Carlo over chain paths and serves as an independent
oracle for the ODE route (note the discount rate inside K follows the chain).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rsmerton.core_model import (
    MarketSpec,
    PiecewiseCoefficients,
    coefficients_at,
    validate_spec,
)
from rsmerton.ctmc import CHAIN_SUBSTREAM, RngSpec, iter_cells, sample_skeletons
from rsmerton.ode_engine import (
    OdeSystem,
    SolutionTable,
    interp_by_state,
    merge_breakpoints,
    rk4_solve,
    solve_terminal_ode,
    step_cumulative,
)

G_POSITIVITY_FLOOR = 1e-12
PICARD_EVAL_POINTS = 17
PICARD_QUAD_CELLS = 128


def growth_exponent(spec: MarketSpec, t: float, coeffs: PiecewiseCoefficients | None = None):
    """Per-state coefficient gamma*r + mu^2*gamma/(2 sigma^2 (1-gamma)) of the g-system."""
    g = spec.gamma
    r, mu, sigma = coefficients_at(spec, t, coeffs)
    return g * r + mu**2 * g / (2 * sigma**2 * (1 - g))


def market_legs(
    spec: MarketSpec,
    coeffs: PiecewiseCoefficients | None,
    t_start: float,
    horizon: float,
):
    """Constant-coefficient legs (t_lo, t_hi, r, mu, sigma) covering [t_start, horizon]."""
    if coeffs is None:
        return [(t_start, horizon, spec.r, spec.mu, spec.sigma)]
    cuts = [t_start]
    cuts += [float(b) for b in coeffs.breakpoints if t_start < b < horizon]
    cuts.append(horizon)
    legs = []
    for lo, hi in zip(cuts, cuts[1:]):
        r, alpha, sigma = coeffs.at(lo)
        legs.append((lo, hi, r, alpha - r, sigma))
    return legs


def solve_market_ode(
    make_rhs,
    spec: MarketSpec,
    coeffs: PiecewiseCoefficients | None,
    terminal: np.ndarray,
    n_steps: int,
    tol: float | None,
    t_start: float = 0.0,
    horizon: float | None = None,
    positivity_floor=None,
) -> SolutionTable:
    """Composite backward solve over the market's constant-coefficient legs.

    make_rhs(r, mu, sigma) builds the leg's right-hand side with coefficients
    pinned, so each leg is smooth and coefficient discontinuities always land
    on leg boundaries. tol=None does one fixed-step sweep per leg.
    """
    horizon = spec.horizon if horizon is None else horizon
    legs = market_legs(spec, coeffs, t_start, horizon)
    total = horizon - t_start
    term = np.asarray(terminal, dtype=float)
    tables = []
    for lo, hi, r, mu, sigma in reversed(legs):
        steps = max(16, int(round(n_steps * (hi - lo) / total)))
        system = OdeSystem(
            dimension=term.size,
            rhs=make_rhs(r, mu, sigma),
            terminal_values=term,
            horizon=hi,
            t_start=lo,
            positivity_floor=positivity_floor,
        )
        table = (
            rk4_solve(system, steps) if tol is None
            else solve_terminal_ode(system, n_steps=steps, tol=tol)
        )
        tables.append(table)
        term = table.values[0]
    tables.reverse()
    grid = np.concatenate([tables[0].grid] + [t.grid[1:] for t in tables[1:]])
    values = np.vstack([tables[0].values] + [t.values[1:] for t in tables[1:]])
    return SolutionTable(grid=grid, values=values)


@dataclass(frozen=True)
class EquilibriumSolution:
    """Solved coefficient tables for one market spec.

    Power branch: g_table holds g(t, i). Log branch: h_table and l_table hold
    the log-wealth coefficient and the intercept.
    """

    spec: MarketSpec
    branch: str  # "power" | "log"
    g_table: SolutionTable | None = None
    h_table: SolutionTable | None = None
    l_table: SolutionTable | None = None
    coeffs: PiecewiseCoefficients | None = None
    n_steps: int = 0

    def consumption_rate(self, t, i: int):
        """Consumption as a fraction of wealth in regime i at time t (1/year)."""
        if self.branch == "power":
            return np.power(self.g_table.component(t, i), 1.0 / (self.spec.gamma - 1.0))
        return 1.0 / self.h_table.component(t, i)

    def consumption_curve(self) -> "ConsumptionCurve":
        table = self.g_table if self.branch == "power" else self.h_table
        if self.branch == "power":
            rates = np.power(table.values, 1.0 / (self.spec.gamma - 1.0))
        else:
            rates = 1.0 / table.values
        return ConsumptionCurve(grid=table.grid, rates=rates)

    def investment_fraction(self, t: float, i: int) -> float:
        """Risky-asset dollar position per unit wealth in regime i."""
        _, mu, sigma = coefficients_at(self.spec, float(t), self.coeffs)
        denom = 1.0 - (self.spec.gamma if self.branch == "power" else 0.0)
        return float(mu[i] / (sigma[i] ** 2 * denom))


@dataclass(frozen=True)
class ConsumptionCurve:
    """Per-regime consumption rate C(t, i) on a dense time grid."""

    grid: np.ndarray
    rates: np.ndarray  # (n_nodes, S)

    def to_csv(self, meta: dict | None = None) -> str:
        cols = ",".join(f"C{j}" for j in range(self.rates.shape[1]))
        lines = []
        if meta:
            lines.append("# " + " ".join(f"{k}={v}" for k, v in meta.items()))
        lines.append("t," + cols)
        for k in range(self.grid.size):
            row = ",".join(f"{v:.12g}" for v in self.rates[k])
            lines.append(f"{self.grid[k]:.12g},{row}")
        return "\n".join(lines) + "\n"


def solve_g(
    spec: MarketSpec,
    n_steps: int = 2048,
    tol: float = 1e-9,
    coeffs: PiecewiseCoefficients | None = None,
) -> EquilibriumSolution:
    """Solve the coupled nonlinear g-system backward from g(T, i) = 1 (power branch)."""
    validate_spec(spec)
    if spec.prefs.is_log:
        raise ValueError("solve_g is the power branch; use solve_log for gamma = 0")
    g = spec.gamma
    rates = spec.generator.rates
    rho = spec.rho
    power = g / (g - 1.0)

    def make_rhs(r, mu, sigma):
        q = g * r + mu**2 * g / (2 * sigma**2 * (1 - g))

        def rhs(t, y):
            return -((q - rho) * y + rates @ y + (1 - g) * np.power(y, power))

        return rhs

    table = solve_market_ode(
        make_rhs, spec, coeffs, np.ones(spec.states), n_steps, tol,
        positivity_floor=G_POSITIVITY_FLOOR,
    )
    return EquilibriumSolution(
        spec=spec, branch="power", g_table=table, coeffs=coeffs, n_steps=table.grid.size - 1
    )


def _log_rhs_factory(spec: MarketSpec):
    """Leg-wise right-hand side of the joint (h, l) system.

    The l equation carries -log h(t,i) from substituting the log ansatz into
    the verification PDE (the running utility of consuming x/h contributes
    log x - log h).
    """
    S = spec.states
    rates = spec.generator.rates
    rho = spec.rho

    def make_rhs(r, mu, sigma):
        drive = r + mu**2 / (2 * sigma**2)

        def rhs(t, y):
            h, low = y[:S], y[S:]
            dh = -(-rho * h + rates @ h + 1.0)
            dl = -(drive * h - np.log(h) - rho * low + rates @ low - 1.0)
            return np.concatenate([dh, dl])

        return rhs

    return make_rhs


def log_system(
    spec: MarketSpec, coeffs: PiecewiseCoefficients | None = None, t: float = 0.0
) -> OdeSystem:
    """Joint (h, l) terminal-value system with the coefficients in force at time t.

    Mainly a residual-checking surface; solve_log integrates leg by leg.
    """
    S = spec.states
    r, mu, sigma = coefficients_at(spec, t, coeffs)
    terminal = np.concatenate([np.ones(S), np.zeros(S)])
    floor = np.concatenate([np.full(S, G_POSITIVITY_FLOOR), np.full(S, -np.inf)])
    return OdeSystem(
        dimension=2 * S,
        rhs=_log_rhs_factory(spec)(r, mu, sigma),
        terminal_values=terminal,
        horizon=spec.horizon,
        positivity_floor=floor,
    )


def solve_log(
    spec: MarketSpec,
    n_steps: int = 2048,
    tol: float = 1e-9,
    coeffs: PiecewiseCoefficients | None = None,
) -> EquilibriumSolution:
    """Solve the linear h- and l-systems backward from h(T)=1, l(T)=0 (log branch)."""
    validate_spec(spec)
    if not spec.prefs.is_log:
        raise ValueError("solve_log is the log branch; use solve_g for gamma != 0")
    S = spec.states
    terminal = np.concatenate([np.ones(S), np.zeros(S)])
    floor = np.concatenate([np.full(S, G_POSITIVITY_FLOOR), np.full(S, -np.inf)])
    table = solve_market_ode(
        _log_rhs_factory(spec), spec, coeffs, terminal, n_steps, tol,
        positivity_floor=floor,
    )
    h = SolutionTable(grid=table.grid, values=table.values[:, :S])
    low = SolutionTable(grid=table.grid, values=table.values[:, S:])
    return EquilibriumSolution(
        spec=spec, branch="log", h_table=h, l_table=low, coeffs=coeffs,
        n_steps=table.grid.size - 1,
    )


def solve(spec: MarketSpec, **kwargs) -> EquilibriumSolution:
    """Dispatch to the power or log branch based on the spec's preferences."""
    return solve_log(spec, **kwargs) if spec.prefs.is_log else solve_g(spec, **kwargs)


@dataclass(frozen=True)
class PolicyField:
    """Feedback maps (t, x, i) -> (investment dollars, consumption rate), linear in x."""

    solution: EquilibriumSolution

    def at(self, t: float, x: float, i: int) -> tuple[float, float]:
        sol = self.solution
        spec = sol.spec
        if not 0.0 <= t <= spec.horizon:
            raise ValueError(f"t={t} outside [0, {spec.horizon}]")
        if x < 0:
            raise ValueError("wealth must be nonnegative")
        if not 0 <= i < spec.states:
            raise IndexError(f"state {i} out of range")
        _, mu, sigma = coefficients_at(spec, t, sol.coeffs)
        gamma = spec.gamma if sol.branch == "power" else 0.0
        invest = mu[i] * x / (sigma[i] ** 2 * (1.0 - gamma))
        consume = float(sol.consumption_rate(t, i)) * x
        return float(invest), consume


def policy_at(field: PolicyField, t: float, x: float, i: int) -> tuple[float, float]:
    """Evaluate the feedback policy; see PolicyField.at."""
    return field.at(t, x, i)


def value_at(solution: EquilibriumSolution, t: float, x: float, i: int) -> float:
    """Value-ansatz evaluation: g(t,i) x^gamma/gamma, or h(t,i) log x + l(t,i)."""
    spec = solution.spec
    if x <= 0:
        raise ValueError("wealth must be positive")
    if not 0.0 <= t <= spec.horizon:
        raise ValueError(f"t={t} outside [0, {spec.horizon}]")
    if solution.branch == "power":
        g = solution.g_table.component(t, i)
        return float(g * x**spec.gamma / spec.gamma)
    h = solution.h_table.component(t, i)
    low = solution.l_table.component(t, i)
    return float(h * np.log(x) + low)


def merton_eta(spec: MarketSpec) -> float:
    """Exponent eta = (rho - gamma [mu^2/(2 sigma^2 (1-gamma)) + r]) / (1-gamma).

    Requires a single effective regime: state-independent coefficients and a
    common discount rate.
    """
    _require_single_regime(spec)
    g = spec.gamma
    mu, sigma, r, rho = spec.mu[0], spec.sigma[0], spec.r[0], spec.rho[0]
    return float((rho - g * (mu**2 / (2 * sigma**2 * (1 - g)) + r)) / (1 - g))


def merton_closed_form(spec: MarketSpec, t):
    """Closed-form consumption rate eta / (1 + (eta - 1) e^{eta (t - T)}).

    The eta = 0 degeneracy is the continuous extension C(t) = 1/(1 + T - t).
    """
    eta = merton_eta(spec)
    t = np.asarray(t, dtype=float)
    T = spec.horizon
    if abs(eta) < 1e-12:
        out = 1.0 / (1.0 + T - t)
    else:
        out = eta / (1.0 + (eta - 1.0) * np.exp(eta * (t - T)))
    return out if out.ndim else float(out)


def _require_single_regime(spec: MarketSpec):
    for name in ("r", "alpha", "sigma", "rho"):
        v = getattr(spec, name)
        if not np.allclose(v, v[0], rtol=0, atol=0):
            raise ValueError(f"closed form needs state-independent {name}, got {v.tolist()}")


@dataclass(frozen=True)
class PicardEstimate:
    """Monte-Carlo image of a candidate table under the fixed-point operator."""

    eval_times: np.ndarray
    values: np.ndarray  # (n_times, S)
    stderr: np.ndarray  # (n_times, S)
    n_paths: int
    algorithm: str
    seed: int
    stream: int

    def deviation_from(self, table: SolutionTable) -> np.ndarray:
        """Pointwise |operator output - table| on the evaluation grid."""
        ref = table.interpolate(self.eval_times)
        return np.abs(self.values - ref)


def picard_apply(
    spec: MarketSpec,
    g_candidate: SolutionTable,
    n_paths: int,
    rng: RngSpec,
    eval_times: np.ndarray | None = None,
    quad_cells: int = PICARD_QUAD_CELLS,
    coeffs: PiecewiseCoefficients | None = None,
) -> PicardEstimate:
    """Apply the integral fixed-point operator to a candidate g by Monte Carlo.

    For each evaluation point (t, i), chain paths are sampled from state i at
    time t and the operator E[K(T)] + (1-gamma) E int K g^(gamma/(gamma-1))
    is integrated by trapezoid along each path, with jump times inserted as
    breakpoints (the exponent of K is integrated exactly segment by segment,
    since the discount rate rides the chain).
    """
    validate_spec(spec)
    if spec.prefs.is_log:
        raise ValueError("the fixed-point operator applies to the power branch")
    if (g_candidate.values <= 0).any():
        raise ValueError("candidate table must be strictly positive")
    gamma = spec.gamma
    T = spec.horizon
    S = spec.states
    if eval_times is None:
        eval_times = np.linspace(0.0, T, PICARD_EVAL_POINTS)
    eval_times = np.asarray(eval_times, dtype=float)
    gp_grid = g_candidate.grid
    gp_tab = np.power(g_candidate.values, gamma / (gamma - 1.0))

    values = np.zeros((eval_times.size, S))
    stderr = np.zeros((eval_times.size, S))
    for pt, t0 in enumerate(eval_times):
        for i in range(S):
            if t0 >= T:
                values[pt, i] = 1.0  # K(T)=1, empty integral
                continue
            n_cells = max(8, int(round(quad_cells * (T - t0) / T)))
            edges = np.linspace(t0, T, n_cells + 1)
            samples = _picard_path_values(
                spec, gamma, gp_grid, gp_tab, i, t0, edges, n_paths, rng,
                substream=(CHAIN_SUBSTREAM, pt * S + i), coeffs=coeffs,
            )
            values[pt, i] = samples.mean()
            stderr[pt, i] = samples.std(ddof=1) / np.sqrt(n_paths)
    return PicardEstimate(
        eval_times=eval_times,
        values=values,
        stderr=stderr,
        n_paths=n_paths,
        algorithm=rng.algorithm,
        seed=rng.seed,
        stream=rng.stream,
    )


def _picard_path_values(
    spec, gamma, gp_grid, gp_tab, initial, t0, edges, n_paths, rng, substream, coeffs
):
    """Per-path K(T) + (1-gamma) * int K g^(gamma/(gamma-1)) dv from (t0, initial)."""
    T = spec.horizon
    rho = spec.rho
    skel = sample_skeletons(
        spec.generator, initial, t0, T, n_paths, rng, substream=substream
    )
    # Exact per-state cumulative of the exponent rate (a step function in t).
    bp = None if coeffs is None else coeffs.breakpoints
    nodes = merge_breakpoints(edges, bp)
    ivals = np.stack(
        [growth_exponent(spec, tn, coeffs) - rho for tn in nodes[:-1]], axis=0
    )
    cq = step_cumulative(nodes, ivals)
    edge_idx = np.searchsorted(nodes, edges)
    gp_edges = np.stack(
        [np.interp(edges, gp_grid, gp_tab[:, j]) for j in range(spec.states)], axis=1
    )
    expo = np.zeros(n_paths)  # running log K
    integral = np.zeros(n_paths)
    for k, entry, _exit, corr in iter_cells(skel, edges):
        dt = edges[k + 1] - edges[k]
        d_expo = cq[edge_idx[k + 1], entry] - cq[edge_idx[k], entry]
        f_lo = np.exp(expo) * gp_edges[k, entry]
        f_hi = np.exp(expo + d_expo) * gp_edges[k + 1, entry]
        contrib = 0.5 * (f_lo + f_hi) * dt
        if corr is not None:
            sub, rounds = corr
            e_sub = expo[sub].copy()
            c_sub = np.zeros(sub.size)
            for seg_lo, seg_hi, seg_state in rounds:
                de = interp_by_state(nodes, cq, seg_hi, seg_state) - interp_by_state(
                    nodes, cq, seg_lo, seg_state
                )
                g_lo = interp_by_state(gp_grid, gp_tab, seg_lo, seg_state)
                g_hi = interp_by_state(gp_grid, gp_tab, seg_hi, seg_state)
                c_sub += 0.5 * (np.exp(e_sub) * g_lo + np.exp(e_sub + de) * g_hi) * (
                    seg_hi - seg_lo
                )
                e_sub += de
            d_expo[sub] = e_sub - expo[sub]
            contrib[sub] = c_sub
        expo = expo + d_expo
        integral += contrib
    return np.exp(expo) + (1.0 - gamma) * integral
