"""Cadlag index paths of the switching chain and their empirical statistics.

The chain lives on states 1..m and has generator -B: in state k it waits an
Exponential(b_kk) holding time, then jumps to j != k with probability
-b_kj / b_kk.  Paths are stored as events (initial state plus sorted jump
times and targets), never as time grids, because downstream per-path dynamic
programming needs the exact jump times.

Sampling is reproducible and order-independent: path number n of an ensemble
with master seed s draws from a counter-based Philox stream keyed on (s, n),
and holding times come from the inverse exponential CDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingMatrix, transition_matrix
from .errors import EmptyEnsemble, OutOfHorizon

MAX_JUMPS_FACTOR = 80  # hard cap on jumps per path, at rate*T + slack


@dataclass(frozen=True)
class IndexPath:
    """One sample path: right-continuous, piecewise-constant states in 1..m.

    ``jump_times`` are strictly increasing in (0, horizon]; ``jump_states``
    are the states entered at those times, each different from its
    predecessor.
    """

    initial_state: int
    jump_times: np.ndarray
    jump_states: np.ndarray
    horizon: float
    m: int

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        states = np.asarray(self.jump_states, dtype=int)
        if times.shape != states.shape or times.ndim != 1:
            raise ValueError("jump times and states must be matching 1-d arrays")
        if times.size:
            if not np.all(np.diff(times) > 0.0):
                raise ValueError("jump times must be strictly increasing")
            if times[0] <= 0.0 or times[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            seq = np.concatenate(([self.initial_state], states))
            if np.any(seq[1:] == seq[:-1]):
                raise ValueError("consecutive states must differ")
            if states.min() < 1 or states.max() > self.m:
                raise ValueError("states must lie in 1..m")
        if not 1 <= self.initial_state <= self.m:
            raise ValueError("initial state must lie in 1..m")
        object.__setattr__(self, "jump_times", _readonly(times))
        object.__setattr__(self, "jump_states", _readonly(states))

    @property
    def jump_count(self) -> int:
        return int(self.jump_times.size)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based per-path stream keyed on (master seed, path index)."""
    key = np.array([np.uint64(master_seed), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_path(coupling: CouplingMatrix, i: int, horizon: float, rng: np.random.Generator) -> IndexPath:
    """Hold-and-jump simulation of the chain started at state i on [0, T]."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if not 1 <= i <= coupling.m:
        raise ValueError(f"initial state {i} outside 1..{coupling.m}")
    b = coupling.entries
    max_jumps = int(coupling.max_rate * horizon * MAX_JUMPS_FACTOR) + 1000
    times = []
    states = []
    state = i - 1
    t = 0.0
    for _ in range(max_jumps):
        rate = b[state, state]
        if rate <= 0.0:
            break  # absorbing state
        t += -np.log1p(-rng.random()) / rate
        if t > horizon:
            break
        weights = -b[state, :] / rate
        weights[state] = 0.0
        u = rng.random()
        state = int(np.searchsorted(np.cumsum(weights), u, side="right"))
        times.append(t)
        states.append(state + 1)
    else:
        raise RuntimeError("path exceeded the jump cap; generator rates look wrong")
    return IndexPath(i, np.asarray(times), np.asarray(states, dtype=int), horizon, coupling.m)


def state_at(path: IndexPath, t: float) -> int:
    """Right-continuous evaluation: the state after the last jump at or before t."""
    if t < 0.0 or t > path.horizon:
        raise OutOfHorizon(f"t = {t} outside [0, {path.horizon}]")
    idx = int(np.searchsorted(path.jump_times, t, side="right"))
    return path.initial_state if idx == 0 else int(path.jump_states[idx - 1])


def shift(path: IndexPath, h: float) -> IndexPath:
    """The path t -> omega(t + h) on the shortened horizon T - h."""
    if h < 0.0 or h > path.horizon:
        raise OutOfHorizon(f"shift h = {h} outside [0, {path.horizon}]")
    keep = path.jump_times > h
    return IndexPath(
        state_at(path, h),
        path.jump_times[keep] - h,
        path.jump_states[keep],
        path.horizon - h,
        path.m,
    )


@dataclass(frozen=True)
class PathEnsemble:
    """Paths sharing one initial state and horizon, plus their seed record."""

    paths: tuple
    initial_state: int
    horizon: float
    m: int
    master_seed: int = field(default=0)

    def __len__(self) -> int:
        return len(self.paths)


def sample_ensemble(
    coupling: CouplingMatrix, i: int, horizon: float, count: int, master_seed: int
) -> PathEnsemble:
    """Sample ``count`` independent paths started at i, reproducibly."""
    paths = tuple(
        sample_path(coupling, i, horizon, path_rng(master_seed, n)) for n in range(count)
    )
    return PathEnsemble(paths, i, horizon, coupling.m, master_seed)


def mismatch_probability(ensemble: PathEnsemble, t1: float, t2: float) -> float:
    """Empirical frequency of omega(t1) != omega(t2)."""
    if len(ensemble) == 0:
        raise EmptyEnsemble("mismatch probability of an empty ensemble")
    hits = sum(1 for p in ensemble.paths if state_at(p, t1) != state_at(p, t2))
    return hits / len(ensemble)


def cylinder_frequency(ensemble: PathEnsemble, times, states) -> float:
    """Empirical probability of {omega(t_1) = i_1, ..., omega(t_k) = i_k}."""
    if len(ensemble) == 0:
        raise EmptyEnsemble("cylinder frequency of an empty ensemble")
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=int)
    if times.size != states.size:
        raise ValueError("times and states must have equal length")
    if times.size and np.any(np.diff(times) < 0.0):
        raise ValueError("times must be sorted")
    hits = 0
    for p in ensemble.paths:
        if all(state_at(p, float(t)) == int(s) for t, s in zip(times, states)):
            hits += 1
    return hits / len(ensemble)


def empirical_state_law(ensemble: PathEnsemble, t: float) -> np.ndarray:
    """Histogram of omega(t) over the ensemble, as a probability vector."""
    if len(ensemble) == 0:
        raise EmptyEnsemble("state law of an empty ensemble")
    counts = np.zeros(ensemble.m)
    for p in ensemble.paths:
        counts[state_at(p, t) - 1] += 1
    return counts / len(ensemble)


def predicted_state_law(coupling: CouplingMatrix, i: int, t: float) -> np.ndarray:
    """Row i of exp(-t B); the exact law of omega(t) under P_i."""
    return transition_matrix(coupling, t).entries[i - 1]


# -- serialization -----------------------------------------------------------
# Line format: `initial_state horizon; t1:s1 t2:s2 ...`

def save_ensemble(ensemble: PathEnsemble, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# seed={ensemble.master_seed} m={ensemble.m} count={len(ensemble)}\n")
        for p in ensemble.paths:
            events = " ".join(f"{float(t)!r}:{int(s)}" for t, s in zip(p.jump_times, p.jump_states))
            fh.write(f"{p.initial_state} {float(p.horizon)!r};{' ' + events if events else ''}\n")


def load_ensemble(path: str) -> PathEnsemble:
    paths = []
    seed = 0
    m = 0
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta = dict(part.split("=") for part in line[1:].split())
                seed = int(meta.get("seed", 0))
                m = int(meta.get("m", 0))
                continue
            head, _, tail = line.partition(";")
            state_str, horizon_str = head.split()
            times = []
            states = []
            for event in tail.split():
                t_str, s_str = event.split(":")
                times.append(float(t_str))
                states.append(int(s_str))
            m_line = max([int(state_str)] + states) if states else int(state_str)
            m = max(m, m_line)
            paths.append((int(state_str), np.asarray(times), np.asarray(states, dtype=int), float(horizon_str)))
    if not paths:
        raise EmptyEnsemble(f"no paths in {path}")
    built = tuple(IndexPath(s, t, st, h, m) for s, t, st, h in paths)
    first = built[0]
    if any(p.initial_state != first.initial_state or p.horizon != first.horizon for p in built):
        raise ValueError("ensemble paths must share initial state and horizon")
    return PathEnsemble(built, first.initial_state, first.horizon, m, seed)
