"""Deterministic variational dynamic programming for one frozen index.

A segment problem minimizes, over curves xi on [a, T] with xi(a) = y,

    terminal(xi(T)) + integral_a^T L_eff(t, xi(t), -d/dt xi(t)) dt

where L_eff(t, x, q) is either the plain member Lagrangian L_j(x, q) or the
effective one L_j(x, q) - (B u(T - t, .))_j(x) backed by a solved field u.
The DP time variable is the curve parameter, so the field is always read at
the reversed time T - t; that conversion happens in exactly one place here.

The backward table lives on a time lattice anchored at the final time T with
uniform step; a segment starting strictly between lattice points gets one
extra head level at its exact start time.  Anchoring makes tables reusable
across segments of the random construction (they share everything but the
head), and it keeps the extraction independent of any future jump times,
which is what makes the random curves nonanticipating by construction.

Velocities in the table recursion are curve velocities: the running cost is
always evaluated at q = -v.  Ties in the discrete min resolve to the
lexicographically smallest lattice velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .errors import InconsistentTable, OutOfDomain, SegmentFailure, VelocityRangeExceeded
from .grids import Box, lattice_boundary_mask, velocity_lattice
from .pde_solver import GridField, ProblemInstance, Resolution, dp_time_step, problem_q_max

LATTICE_SNAP = 1e-12


@dataclass(frozen=True)
class SegmentProblem:
    """Frozen-index minimization on [start_time, final_time] from start_point.

    ``terminal_index`` selects the initial-datum component paying the
    terminal cost; the random construction uses the frozen index itself.
    ``field`` switches the running cost to the effective Lagrangian.
    """

    problem: ProblemInstance
    frozen_index: int
    start_time: float
    start_point: np.ndarray
    field: GridField | None = None
    terminal_index: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.start_time < self.problem.horizon:
            raise ValueError("segment needs 0 <= start time < horizon")
        pt = np.atleast_1d(np.asarray(self.start_point, dtype=float))
        if pt.size != self.problem.dim:
            raise ValueError("start point dimension mismatch")
        object.__setattr__(self, "start_point", pt)
        if self.terminal_index is None:
            object.__setattr__(self, "terminal_index", self.frozen_index)
        if not 1 <= self.frozen_index <= self.problem.m:
            raise ValueError("frozen index outside 1..m")

    @property
    def final_time(self) -> float:
        return self.problem.horizon

    def terminal_cost(self, points) -> np.ndarray:
        return np.asarray(self.problem.initial_datum[self.terminal_index - 1](points), dtype=float)


@dataclass(frozen=True)
class ValueTable:
    """Backward value table W(t_k, .) on the spatial grid."""

    times: np.ndarray
    values: np.ndarray  # (K+1, *box.shape)
    box: Box
    lattice: np.ndarray
    q_max: float


@dataclass(frozen=True)
class MinimizingCurve:
    """A sampled curve with per-step velocities and action increments."""

    times: np.ndarray
    positions: np.ndarray   # (n+1, dim)
    velocities: np.ndarray  # (n, dim)
    increments: np.ndarray  # (n,)
    terminal_cost: float
    dp_value: float
    q_max: float

    def __post_init__(self):
        deltas = np.diff(self.times)
        if np.any(deltas <= 0.0):
            raise SegmentFailure("curve times must increase strictly")
        steps = self.positions[1:] - self.positions[:-1]
        drift = np.max(np.abs(steps - deltas[:, None] * self.velocities), initial=0.0)
        if drift > 1e-12:
            raise SegmentFailure(f"positions break the constant-velocity step law by {drift:.2e}")
        speeds = np.max(np.abs(self.velocities), initial=0.0)
        if speeds > self.q_max + 1e-9:
            raise SegmentFailure(f"velocity {speeds:.3g} exceeds the truncation {self.q_max:.3g}")

    @property
    def total_action(self) -> float:
        return float(np.sum(self.increments) + self.terminal_cost)

    def position_at(self, t: float) -> np.ndarray:
        """Piecewise-linear evaluation inside the sampled span."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise OutOfDomain(f"t = {t} outside the curve span")
        t = min(max(t, self.times[0]), self.times[-1])
        k = min(int(np.searchsorted(self.times, t, side="right")) - 1, self.times.size - 2)
        return self.positions[k] + (t - self.times[k]) * self.velocities[k]

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            dim = self.positions.shape[1]
            head = ("t,x,v,action_increment" if dim == 1 else "t,x,y,v,vy,action_increment")
            fh.write(head + "\n")
            for k, t in enumerate(self.times):
                pos = ",".join(f"{float(c)!r}" for c in self.positions[k])
                if k < self.velocities.shape[0]:
                    vel = ",".join(f"{float(c)!r}" for c in self.velocities[k])
                    inc = float(self.increments[k])
                else:
                    vel = ",".join("0.0" for _ in range(dim))
                    inc = 0.0
                fh.write(f"{float(t)!r},{pos},{vel},{inc!r}\n")


def _segment_box(seg: SegmentProblem, res: Resolution) -> Box:
    if seg.field is not None:
        return seg.field.box
    return Box(np.full(seg.problem.dim, seg.problem.half_width), res.dx)


def _coupling_offset_on_grid(seg: SegmentProblem, t: float) -> np.ndarray:
    """(B u(T - t, .))_j on the grid; zero when no field backs the segment."""
    if seg.field is None:
        return 0.0
    slice_now = seg.field.slice_at(seg.final_time - t)
    row = seg.problem.coupling.entries[seg.frozen_index - 1]
    return np.einsum("i,i...->...", row, slice_now)


def _coupling_offset_at_point(seg: SegmentProblem, t: float, pos: np.ndarray) -> float:
    if seg.field is None:
        return 0.0
    row = seg.problem.coupling.entries[seg.frozen_index - 1]
    return float(row @ seg.field.vector_at(seg.final_time - t, pos))


def anchored_lattice_times(horizon: float, dt: float) -> np.ndarray:
    """Uniform time levels {0, dt, ..., horizon}; dt is assumed to divide it."""
    count = int(round(horizon / dt))
    return np.linspace(0.0, horizon, count + 1)


def lattice_table(seg: SegmentProblem, res: Resolution, cache: dict | None = None) -> ValueTable:
    """Backward table on the anchored lattice, independent of the start time."""
    key = (seg.frozen_index, seg.terminal_index, seg.field is None)
    if cache is not None and key in cache:
        return cache[key]
    problem = seg.problem
    dt = dp_time_step(problem, res)
    q_max = problem_q_max(problem, res)
    dv = res.dx / dt
    lattice = velocity_lattice(q_max, dv, problem.dim)
    box = _segment_box(seg, res)
    times = anchored_lattice_times(problem.horizon, dt)
    nodes = box.node_mesh()
    member = problem.lagrangians.member(seg.frozen_index)
    node_lag = _NodeCost(member, nodes)
    values = np.empty((times.size,) + box.shape)
    values[-1] = seg.terminal_cost(nodes.reshape(-1, box.dim)).reshape(box.shape)
    boundary = lattice_boundary_mask(lattice)
    for k in range(times.size - 2, -1, -1):
        delta = times[k + 1] - times[k]
        values[k] = _backward_step(seg, box, node_lag, lattice, boundary, values[k + 1], float(times[k]), delta)
    table = ValueTable(times, values, box, lattice, q_max)
    if cache is not None:
        cache[key] = table
    return table


class _NodeCost:
    """L_j(nodes, -v) for lattice velocities, with the quadratic fast path."""

    def __init__(self, member, nodes_mesh: np.ndarray):
        self.member = member
        self.nodes_mesh = nodes_mesh
        if isinstance(member, models.QuadraticCosine):
            self.neg_potential = -member.potential(nodes_mesh)
        else:
            self.neg_potential = None

    def at(self, v: np.ndarray) -> np.ndarray:
        if self.neg_potential is not None:
            return 0.5 * float(v @ v) + self.neg_potential
        return self.member.lagrangian(self.nodes_mesh, -v)


def _backward_step(seg, box, node_lag, lattice, boundary, next_values, t, delta):
    best = np.full(next_values.shape, np.inf)
    best_idx = np.zeros(next_values.shape, dtype=np.int32)
    for v_idx, v in enumerate(lattice):
        cand = delta * node_lag.at(v) + box.shift_linear(next_values, delta * v)
        take = cand < best
        best[take] = cand[take]
        best_idx[take] = v_idx
    if boundary[best_idx].any():
        raise VelocityRangeExceeded("backward step argmin on the lattice boundary; raise q_max")
    offset = _coupling_offset_on_grid(seg, t)
    return best - delta * offset


def solve_segment_dp(seg: SegmentProblem, res: Resolution, cache: dict | None = None) -> ValueTable:
    """Value table on {start} plus all anchored lattice times after it."""
    base = lattice_table(seg, res, cache)
    keep = base.times > seg.start_time + LATTICE_SNAP
    if not keep.any():
        raise ValueError("start time must precede the final time")
    times = base.times[keep]
    values = base.values[keep]
    if abs(times[0] - seg.start_time) <= LATTICE_SNAP:
        return ValueTable(times, values, base.box, base.lattice, base.q_max)
    member = seg.problem.lagrangians.member(seg.frozen_index)
    node_lag = _NodeCost(member, base.box.node_mesh())
    head = _backward_step(
        seg, base.box, node_lag, base.lattice, lattice_boundary_mask(base.lattice),
        values[0], seg.start_time, float(times[0] - seg.start_time),
    )
    return ValueTable(
        np.concatenate([[seg.start_time], times]),
        np.concatenate([head[None], values]),
        base.box, base.lattice, base.q_max,
    )


def follow_table(seg: SegmentProblem, table: ValueTable, stop_time: float | None = None):
    """Greedy forward pass from the segment start, truncated at stop_time.

    Works off any table whose levels cover (start, final]; the first step
    runs from the exact start time to the next level, so the anchored
    lattice table serves every start time without a per-segment head solve.
    Returns (times, positions, velocities, increments, dp_value): increments
    are left-endpoint running costs including the coupling offset, and
    dp_value is the step-0 candidate minimum (the DP value at the start).
    """
    stop = seg.final_time if stop_time is None else float(stop_time)
    if not seg.start_time < stop <= seg.final_time + LATTICE_SNAP:
        raise ValueError("stop time must lie inside the segment")
    boundary = lattice_boundary_mask(table.lattice)
    member = seg.problem.lagrangians.member(seg.frozen_index)
    levels = np.flatnonzero(table.times > seg.start_time + LATTICE_SNAP)
    times = [seg.start_time]
    positions = [seg.start_point.astype(float).copy()]
    velocities = []
    increments = []
    dp_value = None
    pos = seg.start_point.astype(float)
    current = seg.start_time
    for level in levels:
        if current >= stop - LATTICE_SNAP:
            break
        next_t = float(table.times[level])
        delta_full = next_t - current
        run_cost = member.lagrangian(pos, -table.lattice)
        feet = pos + delta_full * table.lattice
        cand = delta_full * run_cost + table.box.interpolate(table.values[level], feet)
        pick = int(np.argmin(cand))
        if boundary[pick]:
            raise VelocityRangeExceeded("extraction argmin on the lattice boundary; raise q_max")
        v = table.lattice[pick]
        if not table.box.contains(feet[pick], slack=-table.box.spacing + 1e-9):
            # the minimizer reached the outermost cell, where the constant
            # extension distorts the table: the box is too small
            raise OutOfDomain(f"curve reaches the box edge near t = {next_t}: foot {feet[pick]}")
        offset = _coupling_offset_at_point(seg, current, pos)
        if dp_value is None:
            dp_value = float(cand[pick]) - delta_full * offset
        delta = delta_full
        step_end = next_t
        if step_end > stop + LATTICE_SNAP:
            delta = stop - current
            step_end = stop
        increments.append(delta * (float(run_cost[pick]) - offset))
        pos = pos + delta * v
        times.append(step_end)
        positions.append(pos.copy())
        velocities.append(np.array(v, dtype=float))
        current = step_end
    return (
        np.asarray(times),
        np.stack(positions),
        np.stack(velocities) if velocities else np.zeros((0, seg.problem.dim)),
        np.asarray(increments),
        float(dp_value if dp_value is not None else 0.0),
    )


def consistency_tolerance(table: ValueTable, seg: SegmentProblem, dp_value: float) -> float:
    """Interpolation-order allowance for forward/backward agreement."""
    base = 1e-8 * (1.0 + abs(dp_value))
    curvature = table.times.size * table.box.spacing**2 * (1.0 + seg.problem.kappa)
    return base + curvature


def extract_minimizer(seg: SegmentProblem, table: ValueTable) -> MinimizingCurve:
    """Forward pass over the full segment, with DP-consistency guards."""
    times, positions, velocities, increments, dp_value = follow_table(seg, table)
    terminal = float(seg.terminal_cost(positions[-1][None, :])[0])
    curve = MinimizingCurve(times, positions, velocities, increments, terminal, dp_value, table.q_max)
    gap = abs(curve.total_action - dp_value)
    if gap > consistency_tolerance(table, seg, dp_value):
        raise InconsistentTable(
            f"forward action {curve.total_action:.6g} vs table value {dp_value:.6g} (gap {gap:.2e})"
        )
    if seg.field is not None:
        velocity_budget_check(curve, seg)
    return curve


def velocity_budget_check(curve: MinimizingCurve, seg: SegmentProblem) -> None:
    """Superlinear-envelope budget: sum delta * Theta(|v|) stays bounded.

    Discrete transcription of the equi-absolute-continuity bound; the
    coupling part of the effective running cost adds T * sup |(Bu)_j|,
    which the continuous argument absorbs into the same constants.
    """
    lags = seg.problem.lagrangians
    deltas = np.diff(curve.times)
    speeds = np.linalg.norm(curve.velocities, axis=1)
    spent = float(np.sum(deltas * lags.superlinear_floor(speeds)))
    field = seg.field
    u_sup = float(np.max(np.abs(field.values)))
    coupling_sup = float(
        np.max(np.abs(np.einsum("ij,kj...->ki...", seg.problem.coupling.entries, field.values)))
    )
    span = curve.times[-1] - curve.times[0]
    budget = abs(lags.superlinear_floor(0.0)) * span + 2.0 * u_sup + span * coupling_sup
    if spent > budget + 0.1 * (1.0 + abs(budget)):
        raise SegmentFailure(
            f"velocity budget exceeded: {spent:.4g} > {budget:.4g}; the segment looks degenerate"
        )


def calibration_residual(curve: MinimizingCurve, field: GridField, seg: SegmentProblem) -> float:
    """Max defect of the calibration identity along the curve.

    Compares u_j(T - t, xi(t)) with terminal cost plus the remaining
    effective action, trapezoid quadrature on the curve's own time grid.
    """
    j = seg.frozen_index
    horizon = seg.final_time
    member = seg.problem.lagrangians.member(j)
    n = curve.times.size
    offsets = np.asarray([
        _coupling_offset_at_point(seg, float(curve.times[k]), curve.positions[k]) for k in range(n)
    ])
    # per-step trapezoid with that step's own velocity at both ends: exact in
    # v for piecewise-constant-velocity curves
    step_int = np.empty(n - 1)
    for k in range(n - 1):
        v = curve.velocities[k]
        left = float(member.lagrangian(curve.positions[k], -v)) - offsets[k]
        right = float(member.lagrangian(curve.positions[k + 1], -v)) - offsets[k + 1]
        step_int[k] = (curve.times[k + 1] - curve.times[k]) * 0.5 * (left + right)
    remaining = np.concatenate([np.cumsum(step_int[::-1])[::-1], [0.0]])
    terminal = float(seg.terminal_cost(curve.positions[-1][None, :])[0])
    worst = 0.0
    for k in range(n):
        u_val = float(field.vector_at(horizon - float(curve.times[k]), curve.positions[k])[j - 1])
        worst = max(worst, abs(u_val - terminal - remaining[k]))
    return worst
