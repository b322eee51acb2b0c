"""Continuous-time Markov chain paths: exact sampling, lookup and statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


def make_rng(seed, *keys):
    """Counter-based generator for ``seed``, substreamed by integer ``keys``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(keys))
    return np.random.Generator(np.random.Philox(ss))


def _jump_probabilities(lam):
    rates = np.abs(np.diag(lam))
    # Absorbing states (zero rate) never jump; they keep a self-loop row.
    safe = np.where(rates > 0, rates, 1.0)
    probs = np.where(rates[:, None] > 0, lam / safe[:, None], 0.0)
    np.fill_diagonal(probs, np.where(rates > 0, 0.0, 1.0))
    return rates, probs


@dataclass(frozen=True)
class ChainPath:
    """One regime trajectory on ``[t0, T]``.

    ``states[k]`` is in force on ``[jump_times[k-1], jump_times[k])``.
    """

    t0: float
    T: float
    jump_times: np.ndarray
    states: np.ndarray
    n_states: int

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=int)
        if st.size != jt.size + 1:
            raise ValueError("states must have one more entry than jump_times")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= self.t0 or jt[-1] > self.T):
            raise ValueError("jump times must be strictly increasing inside (t0, T]")
        if np.any(st[1:] == st[:-1]):
            raise ValueError("consecutive states must differ")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    @property
    def counts(self):
        """Matrix of jump counts ``N[i, j]`` over the whole path."""
        N = np.zeros((self.n_states, self.n_states), dtype=int)
        np.add.at(N, (self.states[:-1], self.states[1:]), 1)
        return N

    def occupancy(self):
        """Time spent in each state."""
        edges = np.concatenate([[self.t0], self.jump_times, [self.T]])
        occ = np.zeros(self.n_states)
        np.add.at(occ, self.states, np.diff(edges))
        return occ

    def compensated_counts(self, generator):
        """``N_ij - lambda_ij * occupancy_i`` (off-diagonal entries)."""
        lam = np.asarray(generator, dtype=float)
        out = self.counts - lam * self.occupancy()[:, None]
        np.fill_diagonal(out, 0.0)
        return out


def sample_path(generator, i0, t, T, rng):
    """Exact event-driven sample of a chain path started in ``i0`` at ``t``."""
    lam = np.asarray(generator, dtype=float)
    if not t < T:
        raise ValueError("need t < T")
    rates, probs = _jump_probabilities(lam)
    times, states = [], [int(i0)]
    s, i = float(t), int(i0)
    while rates[i] > 0:
        s += rng.exponential(1.0 / rates[i])
        if s > T:
            break
        i = int(rng.choice(lam.shape[0], p=probs[i]))
        times.append(s)
        states.append(i)
    return ChainPath(float(t), float(T), np.array(times), np.array(states), lam.shape[0])


def regime_at(path, s, left=False):
    """Regime in force at ``s``; ``left=True`` returns the pre-jump state ``alpha(s-)``."""
    if not path.t0 <= s <= path.T:
        raise ValueError(f"time {s} outside [{path.t0}, {path.T}]")
    side = "left" if left else "right"
    return int(path.states[np.searchsorted(path.jump_times, s, side=side)])


def transition_matrix(generator, dt):
    """``expm(generator * dt)``, the transition probabilities over ``dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return expm(np.asarray(generator, dtype=float) * dt)


def stationary_distribution(generator):
    lam = np.asarray(generator, dtype=float)
    D = lam.shape[0]
    A = np.vstack([lam.T, np.ones(D)])
    rhs = np.zeros(D + 1)
    rhs[-1] = 1.0
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


@dataclass(frozen=True)
class ChainBatch:
    """Many chain paths packed into padded arrays.

    ``jump_times[p]`` is padded with ``inf`` and ``states[p]`` repeats the
    last state after the final jump.
    """

    t0: float
    T: float
    jump_times: np.ndarray
    states: np.ndarray
    n_jumps: np.ndarray
    n_states: int

    def __len__(self):
        return self.states.shape[0]

    def path(self, p):
        k = int(self.n_jumps[p])
        return ChainPath(self.t0, self.T, self.jump_times[p, :k], self.states[p, :k + 1],
                         self.n_states)

    def regimes_at(self, s):
        """Right-continuous regime of every path at time ``s``."""
        idx = (self.jump_times <= s).sum(axis=1)
        return self.states[np.arange(len(self)), idx]

    @classmethod
    def from_paths(cls, paths):
        paths = list(paths)
        J = max(1, max(len(p.jump_times) for p in paths))
        jt = np.full((len(paths), J), np.inf)
        st = np.empty((len(paths), J + 1), dtype=int)
        for k, p in enumerate(paths):
            nj = len(p.jump_times)
            jt[k, :nj] = p.jump_times
            st[k, :nj + 1] = p.states
            st[k, nj + 1:] = p.states[-1]
        nj = np.array([len(p.jump_times) for p in paths])
        return cls(paths[0].t0, paths[0].T, jt, st, nj, paths[0].n_states)


def sample_paths(generator, i0, t, T, n_paths, rng):
    """Vectorized exact sampling of ``n_paths`` independent chain paths.

    Every round draws one holding time and one uniform per path, so the
    random stream consumed depends only on ``n_paths`` and the longest path.
    """
    lam = np.asarray(generator, dtype=float)
    rates, probs = _jump_probabilities(lam)
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    state = np.full(n_paths, int(i0))
    now = np.full(n_paths, float(t))
    active = np.ones(n_paths, dtype=bool)
    times, states = [], [state.copy()]
    while active.any():
        with np.errstate(divide="ignore"):
            hold = rng.exponential(1.0, size=n_paths) / rates[state]
        uni = rng.random(n_paths)
        now = np.where(active, now + hold, now)
        active &= now <= T
        nxt = (uni[:, None] >= cum[state]).sum(axis=1)
        nxt = np.minimum(nxt, lam.shape[0] - 1)
        state = np.where(active, nxt, state)
        times.append(np.where(active, now, np.inf))
        states.append(state.copy())
    jt = np.stack(times[:-1], axis=1) if len(times) > 1 else np.full((n_paths, 1), np.inf)
    st = np.stack(states[:-1], axis=1) if len(states) > 1 else state[:, None]
    n_jumps = np.isfinite(jt).sum(axis=1)
    if st.shape[1] == jt.shape[1]:
        st = np.concatenate([st, st[:, -1:]], axis=1)
    return ChainBatch(float(t), float(T), jt, st, n_jumps, lam.shape[0])


def write_path_csv(path, fh_or_name):
    """Regime path as ``(time, regime)`` rows, one-based regimes, step-plot ready."""
    rows = [(path.t0, path.states[0] + 1)]
    for s, i_prev, i in zip(path.jump_times, path.states[:-1], path.states[1:]):
        rows.append((s, i_prev + 1))
        rows.append((s, i + 1))
    rows.append((path.T, path.states[-1] + 1))
    with open(fh_or_name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "regime"])
        for s, i in rows:
            w.writerow([repr(float(s)), i])
