"""Continuous-time Markov chain sampling and generator diagnostics.

Paths are sampled Gillespie style: the holding time in state i is
Exponential(-lambda_ii) and the next state is drawn with probability
lambda_ij / (-lambda_ii). Chain noise and diffusion noise elsewhere in the
package come from separately derived substreams of one master seed, so the
chain and the Brownian motion are independent by construction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from rsmerton.core_model import RegimeGenerator
from rsmerton.reporting import MCReport

CHAIN_SUBSTREAM = 0
DIFFUSION_SUBSTREAM = 1


@dataclass(frozen=True)
class RngSpec:
    """Seedable random source: same (algorithm, seed, stream) reproduces bits.

    Only "pcg64" (numpy's default bit generator) is implemented; the name is
    recorded in every Monte-Carlo report so results stay attributable.
    """

    seed: int
    stream: int = 0
    algorithm: str = "pcg64"

    def generator(self, substream: int | tuple = CHAIN_SUBSTREAM) -> np.random.Generator:
        """Derived generator; substream may be an int or a tuple of ints.

        Substream 0 is reserved for chain noise and 1 for diffusion noise so
        the two sources are independent by construction.
        """
        if self.algorithm != "pcg64":
            raise ValueError(f"unsupported rng algorithm: {self.algorithm!r}")
        key = substream if isinstance(substream, tuple) else (substream,)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, *key))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class JumpPath:
    """One realized chain trajectory: jump epochs and the state entered at each."""

    initial_state: int
    jump_times: np.ndarray
    jump_targets: np.ndarray
    horizon: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        tg = np.asarray(self.jump_targets, dtype=np.int64)
        if jt.size:
            if not (np.diff(jt) > 0).all():
                raise ValueError("jump times must be strictly increasing")
            if jt[0] <= 0 or jt[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            states = np.concatenate([[self.initial_state], tg])
            if (np.diff(states) == 0).any():
                raise ValueError("self-jumps must not be recorded")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_targets", tg)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    def state_at(self, t) -> np.ndarray | int:
        """State at time t, right-continuous in t."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.jump_times, t, side="right")
        states = np.concatenate([[self.initial_state], self.jump_targets])
        out = states[k]
        return out if t.ndim else int(out)

    def to_csv(self) -> str:
        """Rows (t_jump, new_state) for debugging."""
        buf = io.StringIO()
        buf.write("t_jump,new_state\n")
        for t, s in zip(self.jump_times, self.jump_targets):
            buf.write(f"{t:.12g},{int(s)}\n")
        return buf.getvalue()


def _transition_tables(generator: RegimeGenerator):
    rates = generator.rates
    hold = generator.holding_rates()
    S = rates.shape[0]
    probs = np.zeros((S, S))
    for i in range(S):
        if hold[i] > 0:
            probs[i] = rates[i] / hold[i]
            probs[i, i] = 0.0
    return hold, np.cumsum(probs, axis=1)


def sample_path(
    generator: RegimeGenerator, initial: int, horizon: float, rng: RngSpec
) -> JumpPath:
    """Sample one chain trajectory on [0, horizon] starting from `initial`."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    hold, pcum = _transition_tables(generator)
    g = rng.generator(CHAIN_SUBSTREAM)
    t, s = 0.0, int(initial)
    times, targets = [], []
    while True:
        if hold[s] <= 0:
            break  # absorbing
        t += g.exponential(1.0 / hold[s])
        if t > horizon:
            break
        s = int(np.searchsorted(pcum[s], g.random(), side="right"))
        times.append(t)
        targets.append(s)
    return JumpPath(
        initial_state=int(initial),
        jump_times=np.array(times),
        jump_targets=np.array(targets, dtype=np.int64),
        horizon=horizon,
    )


@dataclass(frozen=True)
class JumpSkeletons:
    """Ensemble of chain trajectories as inf-padded (max_jumps, n_paths) arrays."""

    initial_state: int
    t_start: float
    horizon: float
    jump_times: np.ndarray
    states_after: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.jump_times.shape[1]

    @property
    def max_jumps(self) -> int:
        return self.jump_times.shape[0]

    def final_states(self) -> np.ndarray:
        return self.state_at(np.full(self.n_paths, self.horizon))

    def state_at(self, t: np.ndarray) -> np.ndarray:
        """Per-path state at per-path times t (right-continuous)."""
        n = (self.jump_times <= t[None, :]).sum(axis=0)
        out = np.full(self.n_paths, self.initial_state, dtype=np.int64)
        has = n > 0
        cols = np.nonzero(has)[0]
        if cols.size:
            out[cols] = self.states_after[n[cols] - 1, cols]
        return out


def sample_skeletons(
    generator: RegimeGenerator,
    initial: int,
    t_start: float,
    horizon: float,
    n_paths: int,
    rng: RngSpec,
    substream: int | tuple = CHAIN_SUBSTREAM,
) -> JumpSkeletons:
    """Vectorized Gillespie sampling of n_paths trajectories on [t_start, horizon].

    Draw order is fixed (one exponential round, one uniform round per jump
    level across all paths), so results are reproducible per RngSpec.
    """
    hold, pcum = _transition_tables(generator)
    S = pcum.shape[0]
    g = rng.generator(substream)
    t = np.full(n_paths, float(t_start))
    s = np.full(n_paths, int(initial), dtype=np.int64)
    jt_rows, st_rows = [], []
    alive = np.ones(n_paths, dtype=bool)
    while alive.any():
        e = g.exponential(1.0, n_paths)
        hr = hold[s]
        dt = np.where(hr > 0, e / np.where(hr > 0, hr, 1.0), np.inf)
        t = t + dt
        alive = t < horizon
        if not alive.any():
            break
        u = g.random(n_paths)
        nxt = np.minimum((u[:, None] > pcum[s]).sum(axis=1), S - 1)
        s = np.where(alive, nxt, s)
        jt_rows.append(np.where(alive, t, np.inf))
        st_rows.append(s.copy())
    if jt_rows:
        jt = np.array(jt_rows)
        st = np.array(st_rows)
    else:
        jt = np.full((0, n_paths), np.inf)
        st = np.full((0, n_paths), int(initial), dtype=np.int64)
    return JumpSkeletons(
        initial_state=int(initial),
        t_start=float(t_start),
        horizon=float(horizon),
        jump_times=jt,
        states_after=st,
    )


def iter_cells(skel: JumpSkeletons, edges: np.ndarray):
    """Walk an ensemble over the cells of a time grid.

    Yields (k, entry_state, exit_state, correction) per cell
    [edges[k], edges[k+1]]: entry/exit are the per-path states at the cell
    edges, and correction is None when no path jumps inside the cell, else
    (sub_idx, rounds) where rounds is a list of (seg_start, seg_end,
    seg_state) sub-segment triples restricted to the jumping paths. The state
    arrays are live views; copy them if they must survive the iteration step.
    """
    P = skel.n_paths
    idx = np.arange(P)
    pad_t = np.vstack([skel.jump_times, np.full((1, P), np.inf)])
    pad_s = (
        np.vstack([skel.states_after, np.zeros((1, P), dtype=np.int64)])
        if skel.max_jumps
        else np.zeros((1, P), dtype=np.int64)
    )
    ptr = np.zeros(P, dtype=np.int64)
    state = np.full(P, skel.initial_state, dtype=np.int64)
    for k in range(len(edges) - 1):
        t_hi = edges[k + 1]
        tj = pad_t[ptr, idx]
        jmask = tj < t_hi
        if not jmask.any():
            yield k, state, state, None
            continue
        sub = np.nonzero(jmask)[0]
        entry = state.copy()
        tcur = np.full(sub.size, edges[k])
        rounds = []
        while True:
            tj_s = pad_t[ptr[sub], sub]
            jumping = tj_s < t_hi
            seg_end = np.where(jumping, tj_s, t_hi)
            rounds.append((tcur, seg_end, state[sub].copy()))
            if not jumping.any():
                break
            state[sub] = np.where(jumping, pad_s[ptr[sub], sub], state[sub])
            ptr[sub] += jumping
            tcur = seg_end
        yield k, entry, state, (sub, rounds)


def occupation_times(skel: JumpSkeletons, n_states: int | None = None) -> np.ndarray:
    """Per-state occupation time over [t_start, horizon], shape (n_states, n_paths)."""
    S = n_states or int(max(skel.initial_state, skel.states_after.max(initial=0))) + 1
    P = skel.n_paths
    occ = np.zeros((S, P))
    tprev = np.full(P, skel.t_start)
    sprev = np.full(P, skel.initial_state, dtype=np.int64)
    for k in range(skel.max_jumps):
        tk = np.minimum(skel.jump_times[k], skel.horizon)
        dur = np.maximum(tk - tprev, 0.0)
        np.add.at(occ, (sprev, np.arange(P)), dur)
        hit = skel.jump_times[k] < skel.horizon
        sprev = np.where(hit, skel.states_after[k], sprev)
        tprev = np.maximum(tprev, tk)
    np.add.at(occ, (sprev, np.arange(P)), np.maximum(skel.horizon - tprev, 0.0))
    return occ


def stationary_distribution(generator: RegimeGenerator) -> np.ndarray:
    """Probability vector pi with pi @ rates = 0 (within 1e-10) for an irreducible chain."""
    closed = _closed_classes(generator)
    S = generator.n_states
    if closed is not None:
        raise ValueError(
            f"generator is reducible: states {sorted(closed)} form an absorbing class"
        )
    A = np.vstack([generator.rates.T, np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    resid = np.abs(pi @ generator.rates).max()
    if resid > 1e-10:
        raise ValueError(f"stationary solve residual {resid:.3e} exceeds 1e-10")
    return pi


def _closed_classes(generator: RegimeGenerator):
    """Return a proper closed communicating class if one exists, else None."""
    S = generator.n_states
    adj = (generator.rates > 0).astype(np.int8)
    np.fill_diagonal(adj, 1)
    reach = adj.copy()
    for _ in range(S):
        reach = ((reach @ adj) > 0).astype(np.int8) | reach
    reach = reach > 0
    mutual = reach & reach.T
    for i in range(S):
        cls = set(np.nonzero(mutual[i])[0].tolist())
        leaves = any(
            reach[j, k] for j in cls for k in range(S) if k not in cls
        )
        if not leaves and len(cls) < S:
            return cls
    return None


def dynkin_check(
    generator: RegimeGenerator,
    test_fn: np.ndarray,
    horizon: float,
    n_paths: int,
    rng: RngSpec,
    initial: int = 0,
) -> MCReport:
    """Zero-mean test of the chain martingale built from a per-state function G.

    Along each path, M(T) = G(J_T) - G(J_0) - integral of (rates @ G)(J_u) du.
    The sample mean of M(T) is reported against target 0.
    """
    if n_paths < 1000:
        raise ValueError("dynkin_check needs at least 1e3 paths")
    G = np.asarray(test_fn, dtype=float)
    skel = sample_skeletons(generator, initial, 0.0, horizon, n_paths, rng)
    occ = occupation_times(skel, n_states=generator.n_states)
    drift = generator.rates @ G
    comp = (occ * drift[:, None]).sum(axis=0)
    m_T = G[skel.final_states()] - G[initial] - comp
    return MCReport.from_samples(m_T, rng, target=0.0)
