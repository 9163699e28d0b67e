"""Problem data: market coefficients, regime generator, preferences, CRRA primitives.

All containers are frozen dataclasses holding read-only numpy arrays, so a
validated spec can be shared freely across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

ROW_SUM_TOL = 1e-12

# |gamma| below this is treated as logarithmic utility (removable singularity
# of c^gamma/gamma at gamma=0).
LOG_GAMMA_EPS = 1e-10


class SpecValidationError(ValueError):
    """Raised when a spec violates its invariants; carries every violation."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RegimeGenerator:
    """Transition-rate matrix of the driving chain (rows sum to zero)."""

    rates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rates", _readonly(self.rates))

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    def violations(self) -> list[str]:
        errs = []
        m = self.rates
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            return [f"generator must be square, got shape {m.shape}"]
        if m.shape[0] < 2:
            errs.append(f"need at least 2 regimes, got {m.shape[0]}")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                if i != j and m[i, j] < 0:
                    errs.append(f"negative off-diagonal rate at ({i},{j}): {m[i, j]}")
            s = m[i].sum()
            if abs(s) > ROW_SUM_TOL:
                errs.append(f"row {i} sums to {s:.6g}")
        return errs

    def holding_rates(self) -> np.ndarray:
        """Per-state exit rates (minus the diagonal)."""
        return -np.diag(self.rates)


@dataclass(frozen=True)
class Preferences:
    """CRRA risk preferences; exactly one of power (gamma != 0) or log applies."""

    gamma: float
    is_log: bool

    @classmethod
    def from_gamma(cls, gamma: float) -> "Preferences":
        if abs(gamma) < LOG_GAMMA_EPS:
            return cls(gamma=0.0, is_log=True)
        return cls(gamma=float(gamma), is_log=False)


@dataclass(frozen=True)
class MarketSpec:
    """Per-regime market coefficients, generator, discounting and preferences.

    Coefficients are constant per regime. Units: rates are 1/year, sigma is
    1/sqrt(year), horizon is years.
    """

    states: int
    r: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    generator: RegimeGenerator
    rho: np.ndarray
    gamma: float
    horizon: float
    prefs: Preferences = field(init=False)

    def __post_init__(self):
        for name in ("r", "alpha", "sigma", "rho"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        object.__setattr__(self, "prefs", Preferences.from_gamma(self.gamma))

    @property
    def mu(self) -> np.ndarray:
        """Per-state excess return alpha - r."""
        return self.alpha - self.r

    def violations(self) -> list[str]:
        errs = list(self.generator.violations())
        n = self.states
        if self.generator.n_states != n:
            errs.append(
                f"generator is {self.generator.n_states}x{self.generator.n_states} "
                f"but states={n}"
            )
        for name in ("r", "alpha", "sigma", "rho"):
            v = getattr(self, name)
            if v.shape != (n,):
                errs.append(f"{name} must have one entry per state, got shape {v.shape}")
        if self.sigma.shape == (n,) and not (self.sigma > 0).all():
            errs.append(f"sigma must be positive, got {self.sigma.tolist()}")
        if self.rho.shape == (n,) and not (self.rho > 0).all():
            errs.append(f"rho must be positive, got {self.rho.tolist()}")
        if not self.horizon > 0:
            errs.append(f"horizon must be positive, got {self.horizon}")
        if not self.gamma < 1:
            errs.append(f"gamma must be below 1, got {self.gamma}")
        return errs


def validate_spec(spec: MarketSpec) -> MarketSpec:
    """Return the spec if every invariant holds, else raise with all violations."""
    errs = spec.violations()
    if errs:
        raise SpecValidationError(errs)
    return spec


_JSON_KEYS = {"states", "r", "alpha", "sigma", "generator", "rho", "gamma", "horizon"}


def market_spec_from_json(doc: str | dict[str, Any]) -> MarketSpec:
    """Build and validate a MarketSpec from a JSON document (unknown keys rejected)."""
    data = json.loads(doc) if isinstance(doc, str) else dict(doc)
    unknown = set(data) - _JSON_KEYS
    if unknown:
        raise SpecValidationError([f"unknown key: {k}" for k in sorted(unknown)])
    missing = _JSON_KEYS - set(data)
    if missing:
        raise SpecValidationError([f"missing key: {k}" for k in sorted(missing)])
    spec = MarketSpec(
        states=int(data["states"]),
        r=data["r"],
        alpha=data["alpha"],
        sigma=data["sigma"],
        generator=RegimeGenerator(data["generator"]),
        rho=data["rho"],
        gamma=float(data["gamma"]),
        horizon=float(data["horizon"]),
    )
    return validate_spec(spec)


def market_spec_to_json(spec: MarketSpec) -> dict[str, Any]:
    return {
        "states": spec.states,
        "r": spec.r.tolist(),
        "alpha": spec.alpha.tolist(),
        "sigma": spec.sigma.tolist(),
        "generator": spec.generator.rates.tolist(),
        "rho": spec.rho.tolist(),
        "gamma": spec.gamma,
        "horizon": spec.horizon,
    }


def utility(c, prefs: Preferences):
    """CRRA utility: c^gamma/gamma for the power branch, ln c for the log branch.

    c = 0 is allowed only when 0 < gamma < 1 (where U(0) = 0).
    """
    c = np.asarray(c, dtype=float)
    if (c < 0).any():
        raise ValueError("consumption must be nonnegative")
    if prefs.is_log:
        if (c == 0).any():
            raise ValueError("log utility diverges at zero consumption")
        return np.log(c) if c.ndim else float(np.log(c))
    g = prefs.gamma
    if g < 0 and (c == 0).any():
        raise ValueError("negative-power utility diverges at zero consumption")
    out = np.power(c, g) / g
    return out if c.ndim else float(out)


def marginal_utility(c, prefs: Preferences):
    """U'(c) = c^(gamma-1) (power) or 1/c (log)."""
    c = np.asarray(c, dtype=float)
    if (c <= 0).any():
        raise ValueError("marginal utility requires positive consumption")
    out = 1.0 / c if prefs.is_log else np.power(c, prefs.gamma - 1.0)
    return out if c.ndim else float(out)


def inverse_marginal_utility(y, prefs: Preferences):
    """Inverse of U': y^(1/(gamma-1)) for power utility, 1/y for log."""
    y = np.asarray(y, dtype=float)
    if (y <= 0).any():
        raise ValueError("marginal utility values must be positive")
    out = 1.0 / y if prefs.is_log else np.power(y, 1.0 / (prefs.gamma - 1.0))
    return out if y.ndim else float(out)


def excess_return(spec: MarketSpec, i: int) -> float:
    """Stock excess return alpha - r in regime i."""
    if not 0 <= i < spec.states:
        raise IndexError(f"state {i} out of range for {spec.states} regimes")
    return float(spec.alpha[i] - spec.r[i])


@dataclass(frozen=True)
class PiecewiseCoefficients:
    """Optional piecewise-constant-in-time override of r, alpha, sigma.

    Interval k is [breakpoints[k-1], breakpoints[k]) with breakpoints strictly
    increasing inside (0, horizon); value arrays have shape (m+1, S) for m
    breakpoints. Solvers evaluate these exactly; for best accuracy align
    breakpoints with the solver grid (they are plain discontinuities of the
    right-hand side otherwise).
    """

    breakpoints: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size and not (np.diff(bp) > 0).all():
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", _readonly(bp))
        for name in ("r", "alpha", "sigma"):
            v = _readonly(getattr(self, name))
            if v.shape[0] != bp.size + 1:
                raise ValueError(f"{name} needs one row per interval ({bp.size + 1})")
            object.__setattr__(self, name, v)
        if not (self.sigma > 0).all():
            raise ValueError("sigma override must be positive")

    def interval(self, t: float) -> int:
        return int(np.searchsorted(self.breakpoints, t, side="right"))

    def at(self, t: float):
        """(r, alpha, sigma) state vectors in force at time t (right-continuous)."""
        k = self.interval(t)
        return self.r[k], self.alpha[k], self.sigma[k]


def coefficients_at(spec: MarketSpec, t: float, coeffs: PiecewiseCoefficients | None):
    """Per-state (r, mu, sigma) at time t, honoring an optional override."""
    if coeffs is None:
        return spec.r, spec.mu, spec.sigma
    r, alpha, sigma = coeffs.at(t)
    return r, alpha - r, sigma
