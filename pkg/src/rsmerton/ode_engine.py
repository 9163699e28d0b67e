"""Backward (terminal-value) integrator for coupled per-regime ODE systems.

The scheme is classical fixed-step fourth-order Runge-Kutta swept from the
horizon down to 0, with step-halving error control: the sweep is repeated at
twice the resolution until the two grids agree to tolerance. Fixed steps keep
results bit-stable across runs and platforms; the systems solved here are
small and non-stiff.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_STEPS = 2048
DEFAULT_TOL = 1e-9
MAX_STEPS = 2**20


class OdeDomainError(RuntimeError):
    """Raised when the state leaves the admissible domain during integration."""

    def __init__(self, t: float, component: int, value: float, reason: str):
        self.t = t
        self.component = component
        self.value = value
        super().__init__(f"{reason} at t={t:.6g}, component {component} (value {value:.6g})")


class OdeConvergenceError(RuntimeError):
    """Raised when step doubling hits the cap before meeting the tolerance."""


@dataclass(frozen=True)
class OdeSystem:
    """Terminal-value problem y'(t) = rhs(t, y) on [t_start, horizon], y(horizon) given.

    rhs must be deterministic and side-effect free. If positivity_floor is
    set, integration aborts as soon as any component drops below it (scalar
    floor or one per component).
    """

    dimension: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    terminal_values: np.ndarray
    horizon: float
    positivity_floor: float | np.ndarray | None = None
    t_start: float = 0.0

    def __post_init__(self):
        tv = np.asarray(self.terminal_values, dtype=float)
        if tv.shape != (self.dimension,):
            raise ValueError(f"terminal_values must have shape ({self.dimension},)")
        if not self.horizon > self.t_start:
            raise ValueError("horizon must exceed t_start")
        object.__setattr__(self, "terminal_values", tv)


@dataclass(frozen=True)
class SolutionTable:
    """Dense grid values of a vector function of time; piecewise-linear between nodes."""

    grid: np.ndarray
    values: np.ndarray  # (n_nodes, dimension)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if not (np.diff(g) > 0).all():
            raise ValueError("grid must be strictly increasing")
        if v.shape[0] != g.size:
            raise ValueError("values must have one row per grid node")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def interpolate(self, t) -> np.ndarray:
        """All components at time(s) t; exact at grid nodes."""
        t = np.asarray(t, dtype=float)
        out = np.stack(
            [np.interp(t, self.grid, self.values[:, j]) for j in range(self.dimension)],
            axis=-1,
        )
        return out

    def component(self, t, j: int):
        return np.interp(t, self.grid, self.values[:, j])

    def to_csv(self, header_meta: dict | None = None) -> str:
        buf = io.StringIO()
        if header_meta:
            buf.write("# " + " ".join(f"{k}={v}" for k, v in header_meta.items()) + "\n")
        buf.write("t," + ",".join(f"y{j}" for j in range(self.dimension)) + "\n")
        for k in range(self.grid.size):
            row = ",".join(f"{v:.12g}" for v in self.values[k])
            buf.write(f"{self.grid[k]:.12g},{row}\n")
        return buf.getvalue()


def _check_domain(system: OdeSystem, t: float, y: np.ndarray, what: str):
    if system.positivity_floor is not None:
        below = y < system.positivity_floor
        if below.any():
            j = int(np.argmax(below))
            raise OdeDomainError(t, j, float(y[j]), f"{what} fell below positivity floor")
    if not np.isfinite(y).all():
        j = int(np.argmax(~np.isfinite(y)))
        raise OdeDomainError(t, j, float(y[j]), f"non-finite {what}")


def rk4_solve(system: OdeSystem, n_steps: int) -> SolutionTable:
    """One fixed-step RK4 sweep from the terminal condition down to t=0.

    Low level: no error control. The terminal node is stored exactly.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    h = (system.horizon - system.t_start) / n_steps
    ts = np.linspace(system.t_start, system.horizon, n_steps + 1)
    out = np.empty((n_steps + 1, system.dimension))
    y = system.terminal_values.copy()
    out[n_steps] = y
    rhs = system.rhs

    def eval_rhs(t, yv):
        _check_domain(system, t, yv, "state")
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            d = np.asarray(rhs(t, yv), dtype=float)
        if not np.isfinite(d).all():
            j = int(np.argmax(~np.isfinite(d)))
            raise OdeDomainError(t, j, float(d[j]), "non-finite derivative")
        return d

    for k in range(n_steps, 0, -1):
        t = ts[k]
        k1 = eval_rhs(t, y)
        k2 = eval_rhs(t - h / 2, y - (h / 2) * k1)
        k3 = eval_rhs(t - h / 2, y - (h / 2) * k2)
        k4 = eval_rhs(t - h, y - h * k3)
        y = y - (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k - 1] = y
    _check_domain(system, system.t_start, y, "state")
    return SolutionTable(grid=ts, values=out)


def solve_terminal_ode(
    system: OdeSystem,
    n_steps: int = DEFAULT_STEPS,
    tol: float = DEFAULT_TOL,
    max_steps: int = MAX_STEPS,
) -> SolutionTable:
    """RK4 sweep with step-halving error control.

    Solves at n and 2n steps and accepts the finer grid once the two sweeps
    agree within tol at the shared nodes; otherwise the step count doubles,
    up to max_steps.
    """
    if n_steps < 16:
        raise ValueError("n_steps must be at least 16")
    coarse = rk4_solve(system, n_steps)
    while True:
        fine = rk4_solve(system, 2 * n_steps)
        err = float(np.abs(fine.values[::2] - coarse.values).max())
        if err <= tol:
            return fine
        n_steps *= 2
        if 2 * n_steps > max_steps:
            raise OdeConvergenceError(
                f"step-halving error {err:.3e} > {tol:.1e} at cap {max_steps} steps"
            )
        coarse = fine


def residual_norm(system: OdeSystem, table: SolutionTable) -> float:
    """Max-norm defect of a table against its defining equations.

    Centered finite differences on interior nodes versus rhs, each component
    scaled by max(1, its sup-norm on the table).
    """
    ts, vs = table.grid, table.values
    if ts.size < 3:
        raise ValueError("residual_norm needs at least 3 grid points")
    scale = np.maximum(1.0, np.abs(vs).max(axis=0))
    worst = 0.0
    for k in range(1, ts.size - 1):
        fd = (vs[k + 1] - vs[k - 1]) / (ts[k + 1] - ts[k - 1])
        res = np.abs(fd - np.asarray(system.rhs(ts[k], vs[k]), dtype=float)) / scale
        worst = max(worst, float(res.max()))
    return worst


def cumulative_trapezoid(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Running trapezoid integral of per-column tables; exact for piecewise-linear data.

    Returns an array of the same shape with zeros in the first row.
    """
    dt = np.diff(grid)
    inc = 0.5 * (values[1:] + values[:-1]) * dt[:, None]
    out = np.empty_like(values)
    out[0] = 0.0
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def interp_by_state(grid: np.ndarray, table: np.ndarray, t: np.ndarray, state: np.ndarray):
    """table[:, state] interpolated at per-element times t (vectorized gather)."""
    out = np.empty(t.shape, dtype=float)
    for j in range(table.shape[1]):
        m = state == j
        if m.any():
            out[m] = np.interp(t[m], grid, table[:, j])
    return out


def step_cumulative(nodes: np.ndarray, interval_values: np.ndarray) -> np.ndarray:
    """Cumulative integral at nodes of per-state rates constant on each internode interval.

    interval_values has shape (len(nodes) - 1, S); the result is exact and
    piecewise-linear, so np.interp between nodes reproduces it everywhere.
    """
    widths = np.diff(nodes)[:, None]
    out = np.empty((nodes.size, interval_values.shape[1]))
    out[0] = 0.0
    np.cumsum(interval_values * widths, axis=0, out=out[1:])
    return out


def merge_breakpoints(edges: np.ndarray, breakpoints: np.ndarray | None) -> np.ndarray:
    """Union of a grid with interior breakpoints, sorted and deduplicated."""
    if breakpoints is None or len(breakpoints) == 0:
        return edges
    inside = breakpoints[(breakpoints > edges[0]) & (breakpoints < edges[-1])]
    return np.unique(np.concatenate([edges, inside]))
