"""Minimizing random curves built by per-path segment dynamic programming.

Given a solved field u and one sampled index path, the construction walks
the constancy intervals of the path: on each interval it freezes the current
index j, minimizes from the current point all the way to the FINAL time with
the effective running cost L_j - (B u)_j and terminal cost u0_j, follows the
selected curve only until the next jump, and restarts from the reached point
with the new index.  Keeping the final time fixed on every segment is what
makes the assembled curve nonanticipating: everything computed up to time t
depends on the jumps up to t only.

The per-index backward tables live on a shared time lattice anchored at the
final time, so one table per frozen index serves every path and every
segment; only the cheap forward passes are per-path.

The Monte Carlo estimate of the expected ORIGINAL-Lagrangian action of these
curves reproduces the solution value u_i(T, x); the per-path relaxed problem
(switching Lagrangian, no nonanticipation) gives a lower bound.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import EmptyEnsemble, NotDifferentiableModel, VelocityRangeExceeded
from .grids import Box, lattice_boundary_mask, velocity_lattice
from .markov import IndexPath, PathEnsemble, state_at
from .path_optimizer import (
    MinimizingCurve,
    SegmentProblem,
    ValueTable,
    anchored_lattice_times,
    follow_table,
    lattice_table,
    velocity_budget_check,
)
from .pde_solver import GridField, ProblemInstance, Resolution, dp_time_step, problem_q_max


@dataclass(frozen=True)
class SegmentRecord:
    """Bookkeeping for one constancy interval: where it started and its index."""

    start_time: float
    start_point: np.ndarray
    frozen_index: int


@dataclass(frozen=True)
class RandomCurveSample:
    """One path's minimizing curve with provenance and its original action."""

    path: IndexPath
    curve: MinimizingCurve
    segments: tuple
    action: float
    terminal_state: int


@dataclass(frozen=True)
class AdjointCurve:
    """Dual momenta d_q L along the curve, with path-jump markers."""

    times: np.ndarray
    values: np.ndarray  # (n+1, dim)
    jump_flags: np.ndarray


@dataclass(frozen=True)
class ActionEstimate:
    mean: float
    std_error: float
    count: int


class MinimizerEngine:
    """Shared state for constructing minimizers over many paths."""

    def __init__(self, field: GridField, problem: ProblemInstance, res: Resolution):
        self.field = field
        self.problem = problem
        self.res = res
        self.cache: dict = {}

    def segment(self, frozen_index: int, start_time: float, start_point) -> SegmentProblem:
        return SegmentProblem(
            self.problem, frozen_index, start_time, np.atleast_1d(np.asarray(start_point, float)),
            field=self.field, terminal_index=frozen_index,
        )

    def table(self, seg: SegmentProblem) -> ValueTable:
        return lattice_table(seg, self.res, self.cache)

    def construct(self, path: IndexPath, x) -> RandomCurveSample:
        return construct_minimizer(self.field, self.problem, path, x, self.res, self.cache)


def _constancy_intervals(path: IndexPath, horizon: float):
    """(start, stop, state) triplets covering [0, horizon]."""
    cuts = [0.0] + [float(t) for t in path.jump_times if t < horizon - 1e-15] + [horizon]
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a > 1e-15:
            out.append((a, b, state_at(path, a)))
    return out


def construct_minimizer(
    field: GridField,
    problem: ProblemInstance,
    path: IndexPath,
    x,
    res: Resolution,
    cache: dict | None = None,
) -> RandomCurveSample:
    """Assemble the concatenated per-segment minimizer for one sample path."""
    cache = {} if cache is None else cache
    horizon = problem.horizon
    point = np.atleast_1d(np.asarray(x, dtype=float))
    intervals = _constancy_intervals(path, horizon)
    times = [np.asarray([0.0])]
    positions = [point[None, :].copy()]
    velocities = []
    increments = []
    records = []
    dp_start = None
    for start, stop, state in intervals:
        seg = SegmentProblem(problem, state, start, point, field=field, terminal_index=state)
        table = lattice_table(seg, res, cache)
        seg_times, seg_pos, seg_vel, seg_inc, dp_value = follow_table(seg, table, stop)
        if dp_start is None:
            dp_start = dp_value
        records.append(SegmentRecord(start, point.copy(), state))
        times.append(seg_times[1:])
        positions.append(seg_pos[1:])
        velocities.append(seg_vel)
        increments.append(seg_inc)
        point = seg_pos[-1]
    terminal_state = state_at(path, horizon)
    terminal_cost = float(problem.initial_datum[terminal_state - 1](point[None, :])[0])
    curve = MinimizingCurve(
        np.concatenate(times),
        np.concatenate(positions, axis=0),
        np.concatenate(velocities, axis=0) if velocities else np.zeros((0, problem.dim)),
        np.concatenate(increments) if increments else np.zeros(0),
        terminal_cost,
        float(dp_start if dp_start is not None else terminal_cost),
        problem_q_max(problem, res),
    )
    first_seg = SegmentProblem(problem, intervals[0][2], 0.0, positions[0][0], field=field)
    velocity_budget_check(curve, first_seg)
    action = original_action(curve, path, problem)
    return RandomCurveSample(path, curve, tuple(records), action, terminal_state)


def original_action(curve: MinimizingCurve, path: IndexPath, problem: ProblemInstance) -> float:
    """Terminal cost plus the switching-Lagrangian integral along the curve.

    Trapezoid quadrature per step; every step lies inside one constancy
    interval because jump times are sample times of the curve.
    """
    total = curve.terminal_cost
    n_steps = curve.velocities.shape[0]
    for k in range(n_steps):
        state = state_at(path, float(curve.times[k]))
        member = problem.lagrangians.member(state)
        v = curve.velocities[k]
        left = float(member.lagrangian(curve.positions[k], -v))
        right = float(member.lagrangian(curve.positions[k + 1], -v))
        total += float(curve.times[k + 1] - curve.times[k]) * 0.5 * (left + right)
    return float(total)


def _estimate(values: np.ndarray) -> ActionEstimate:
    values = np.asarray(values, dtype=float)
    n = values.size
    std_err = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ActionEstimate(float(values.mean()), std_err, n)


def _chunked(seq, workers):
    size = max(1, (len(seq) + workers - 1) // workers)
    return [seq[k:k + size] for k in range(0, len(seq), size)]


def _action_chunk(args):
    engine, paths, x = args
    return [engine.construct(p, x).action for p in paths]


def expected_action(
    field: GridField,
    problem: ProblemInstance,
    ensemble: PathEnsemble,
    x,
    i: int,
    res: Resolution,
    workers: int = 1,
) -> ActionEstimate:
    """Monte Carlo mean and standard error of the original action."""
    if len(ensemble) == 0:
        raise EmptyEnsemble("expected action of an empty ensemble")
    if ensemble.initial_state != i:
        raise ValueError(f"ensemble carries initial state {ensemble.initial_state}, not {i}")
    engine = MinimizerEngine(field, problem, res)
    for j in range(1, problem.m + 1):
        engine.table(engine.segment(j, 0.0, np.zeros(problem.dim)))  # warm the shared tables
    if workers <= 1 or len(ensemble) < 64:
        values = [engine.construct(p, x).action for p in ensemble.paths]
    else:
        chunks = _chunked(list(ensemble.paths), workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_action_chunk, [(engine, c, x) for c in chunks]))
        values = [v for part in parts for v in part]
    return _estimate(np.asarray(values))


def _relaxed_chunk(args):
    problem, res, paths, x = args
    return [relaxed_path_value(problem, p, x, res) for p in paths]


def relaxed_path_value(problem: ProblemInstance, path: IndexPath, x, res: Resolution) -> float:
    """Per-path optimum with the switching Lagrangian: nonanticipation dropped.

    One backward DP over [0, T] whose running cost switches member at each
    jump time (jump times are inserted exactly into the time grid) and whose
    terminal cost is the component the path occupies at the final time.
    """
    horizon = problem.horizon
    dt = dp_time_step(problem, res)
    q_max = problem_q_max(problem, res)
    lattice = velocity_lattice(q_max, res.dx / dt, problem.dim)
    boundary = lattice_boundary_mask(lattice)
    base_times = anchored_lattice_times(horizon, dt)
    jumps = [float(t) for t in path.jump_times if 1e-12 < t < horizon - 1e-12]
    times = np.unique(np.concatenate([base_times, np.asarray(jumps)]))
    box = Box(np.full(problem.dim, problem.half_width), res.dx)
    nodes = box.node_mesh()
    terminal_state = state_at(path, horizon)
    values = np.asarray(
        problem.initial_datum[terminal_state - 1](nodes.reshape(-1, box.dim)), dtype=float
    ).reshape(box.shape)
    costs = {}
    for k in range(times.size - 2, -1, -1):
        delta = float(times[k + 1] - times[k])
        state = state_at(path, float(times[k]))
        if state not in costs:
            costs[state] = _SwitchCost(problem.lagrangians.member(state), nodes)
        best = np.full(box.shape, np.inf)
        best_idx = np.zeros(box.shape, dtype=np.int32)
        for v_idx, v in enumerate(lattice):
            cand = delta * costs[state].at(v) + box.shift_linear(values, delta * v)
            take = cand < best
            best[take] = cand[take]
            best_idx[take] = v_idx
        if boundary[best_idx].any():
            raise VelocityRangeExceeded("relaxed path DP argmin on the lattice boundary; raise q_max")
        values = best
    return float(box.interpolate(values, np.atleast_1d(np.asarray(x, dtype=float))))


class _SwitchCost:
    def __init__(self, member, nodes_mesh):
        self.member = member
        self.nodes_mesh = nodes_mesh
        if isinstance(member, models.QuadraticCosine):
            self.neg_potential = -member.potential(nodes_mesh)
        else:
            self.neg_potential = None

    def at(self, v):
        if self.neg_potential is not None:
            return 0.5 * float(v @ v) + self.neg_potential
        return self.member.lagrangian(self.nodes_mesh, -v)


def relaxation_lower_bound(
    problem: ProblemInstance,
    ensemble: PathEnsemble,
    x,
    i: int,
    res: Resolution,
    workers: int = 1,
) -> ActionEstimate:
    """Monte Carlo mean of the per-path relaxed optima; lower-bounds u_i(T,x)."""
    if len(ensemble) == 0:
        raise EmptyEnsemble("relaxation bound of an empty ensemble")
    if ensemble.initial_state != i:
        raise ValueError(f"ensemble carries initial state {ensemble.initial_state}, not {i}")
    if workers <= 1 or len(ensemble) < 64:
        values = [relaxed_path_value(problem, p, x, res) for p in ensemble.paths]
    else:
        chunks = _chunked(list(ensemble.paths), workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_relaxed_chunk, [(problem, res, c, x) for c in chunks]))
        values = [v for part in parts for v in part]
    return _estimate(np.asarray(values))


def adjoint_curve(sample: RandomCurveSample, lagrangians: models.LagrangianFamily) -> AdjointCurve:
    """P(t) = d_q L_{omega(t)}(eta(t), -d/dt eta(t)) at every sample time."""
    curve = sample.curve
    n = curve.times.size
    values = np.empty((n, curve.positions.shape[1]))
    for k in range(n):
        step = min(k, n - 2)
        state = state_at(sample.path, float(curve.times[step]))
        member = lagrangians.member(state)
        if not member.differentiable:
            raise NotDifferentiableModel("adjoint curves need a differentiable Lagrangian family")
        values[k] = member.lagrangian_q_gradient(curve.positions[k], -curve.velocities[step])
    jump_flags = np.isin(np.round(curve.times, 12), np.round(sample.path.jump_times, 12))
    return AdjointCurve(curve.times.copy(), values, jump_flags)


@dataclass(frozen=True)
class DynamicsReport:
    """Residuals of the twisted Hamiltonian dynamics along one sample."""

    velocity_residual_max: float
    momentum_residuals: np.ndarray
    momentum_residual_median: float
    smooth_points: int
    excluded_points: int


def dynamics_residual(
    sample: RandomCurveSample,
    adjoint: AdjointCurve,
    field: GridField,
    problem: ProblemInstance,
    smoothness_factor: float = 10.0,
) -> DynamicsReport:
    """Check -d/dt eta = d_p H(eta, P) and the momentum law at smooth points.

    The momentum derivative is a centered finite difference of P inside each
    constancy interval; points where the field's spatial second difference
    exceeds ``smoothness_factor`` times its grid median are excluded.
    """
    curve = sample.curve
    horizon = problem.horizon
    n = curve.times.size
    vel_worst = 0.0
    momentum_residuals = []
    excluded = 0
    medians = _second_difference_medians(field)
    for k in range(1, n - 1):
        t_k = float(curve.times[k])
        if adjoint.jump_flags[k] or adjoint.jump_flags[k - 1] or adjoint.jump_flags[k + 1]:
            continue
        state = state_at(sample.path, t_k)
        if state_at(sample.path, float(curve.times[k - 1])) != state or state_at(
            sample.path, float(curve.times[k + 1])
        ) != state:
            continue
        member = problem.hamiltonians.member(state)
        if not member.differentiable:
            raise NotDifferentiableModel("dynamics residuals need differentiable Hamiltonians")
        pos = curve.positions[k]
        _, grad_p = member.hamiltonian_gradients(pos, adjoint.values[k])
        vel_worst = max(vel_worst, float(np.max(np.abs(-curve.velocities[k] - grad_p))))
        if not _smooth_here(field, horizon - t_k, pos, medians, smoothness_factor):
            excluded += 1
            continue
        p_dot = (adjoint.values[k + 1] - adjoint.values[k - 1]) / (
            float(curve.times[k + 1]) - float(curve.times[k - 1])
        )
        lag_member = problem.lagrangians.member(state)
        dx_l = lag_member.lagrangian_x_gradient(pos, -curve.velocities[k])
        coupling_term = np.zeros(problem.dim)
        row = problem.coupling.entries[state - 1]
        for j in range(problem.m):
            if row[j] != 0.0:
                coupling_term += row[j] * field.gradient_at(horizon - t_k, pos, j + 1)
        momentum_residuals.append(float(np.max(np.abs(p_dot - dx_l + coupling_term))))
    momentum_residuals = np.asarray(momentum_residuals)
    median = float(np.median(momentum_residuals)) if momentum_residuals.size else 0.0
    return DynamicsReport(vel_worst, momentum_residuals, median, momentum_residuals.size, excluded)


def _second_difference_medians(field: GridField) -> dict:
    """Median |second spatial difference| per (time level, component)."""
    out = {}
    for k in range(field.times.size):
        for i in range(field.m):
            sl = field.values[k, i]
            worst = np.zeros(sl.shape)
            for d in range(field.box.dim):
                second = np.abs(np.diff(sl, n=2, axis=d))
                pad = [(1, 1) if dd == d else (0, 0) for dd in range(field.box.dim)]
                worst = np.maximum(worst, np.pad(second, pad))
            out[(k, i)] = max(float(np.median(worst)), 1e-15)
    return out


def _smooth_here(field: GridField, t: float, pos, medians: dict, factor: float) -> bool:
    k = int(np.clip(np.searchsorted(field.times, t), 0, field.times.size - 1))
    for i in range(field.m):
        if field.second_difference_at(t, pos, i + 1) > factor * medians[(k, i)]:
            return False
    return True


def per_interval_calibration(
    sample: RandomCurveSample,
    field: GridField,
    problem: ProblemInstance,
) -> float:
    """Max calibration defect over the path's constancy intervals.

    On each interval the solution decrement along the curve must equal the
    integrated effective running cost of the frozen index; the last interval
    is anchored at the terminal cost, earlier ones at their own right end.
    """
    curve = sample.curve
    horizon = problem.horizon
    worst = 0.0
    for record in sample.segments:
        j = record.frozen_index
        member = problem.lagrangians.member(j)
        row = problem.coupling.entries[j - 1]
        stop = _interval_stop(sample, record, horizon)
        mask = (curve.times >= record.start_time - 1e-12) & (curve.times <= stop + 1e-12)
        idx = np.flatnonzero(mask)
        if idx.size < 2:
            continue
        t_loc = curve.times[idx]
        pos_loc = curve.positions[idx]
        offsets = np.asarray([
            float(row @ field.vector_at(horizon - float(t_loc[a]), pos_loc[a]))
            for a in range(idx.size)
        ])
        # per-step trapezoid with that step's own velocity at both ends:
        # exact in v for piecewise-constant-velocity curves
        step_int = np.empty(idx.size - 1)
        for a in range(idx.size - 1):
            v = curve.velocities[idx[a]]
            left = float(member.lagrangian(pos_loc[a], -v)) - offsets[a]
            right = float(member.lagrangian(pos_loc[a + 1], -v)) - offsets[a + 1]
            step_int[a] = (t_loc[a + 1] - t_loc[a]) * 0.5 * (left + right)
        remaining = np.concatenate([np.cumsum(step_int[::-1])[::-1], [0.0]])
        if abs(stop - horizon) <= 1e-12:
            anchor = float(problem.initial_datum[j - 1](pos_loc[-1][None, :])[0])
        else:
            anchor = float(field.vector_at(horizon - stop, pos_loc[-1])[j - 1])
        for a in range(idx.size):
            u_val = float(field.vector_at(horizon - float(t_loc[a]), pos_loc[a])[j - 1])
            worst = max(worst, abs(u_val - anchor - remaining[a]))
    return worst


def _interval_stop(sample: RandomCurveSample, record: SegmentRecord, horizon: float) -> float:
    later = [r.start_time for r in sample.segments if r.start_time > record.start_time + 1e-15]
    return min(later) if later else horizon
