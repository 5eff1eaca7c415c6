"""Named cross-cutting checks with measured margins.

Every identity or inequality the rest of the package can test at desk scale
is packaged here as a check producing a CheckReport: nonexpansiveness and
comparison of the discrete semigroups, the a-priori value bounds, semigroup
composition, scheme cross-validation against the collapse closed form, the
empirical Markov statistics, the sub-optimality principle, the expectation
derivative formula, the expected-action identity of the random minimizers,
the relaxation ordering chain, per-interval calibration, the twisted
dynamics residuals, and semiconcavity of the evolved value.

Checks are deterministic given (seed, resolution, sample budget); purely
statistical ones retry once with four times the samples before reporting a
failure.  Tolerances are derived from recorded resolution and Lipschitz
metadata; the only bare numbers are the 3-sigma multipliers.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import markov, models, path_optimizer, pde_solver, random_minimizer
from .coupling import CouplingMatrix, push_vector, transition_matrix, validate
from .errors import HjswitchError
from .grids import Box
from .pde_solver import GridField, ProblemInstance, Resolution, evaluate


@dataclass(frozen=True)
class CheckReport:
    """One named check: measured defect against its derived tolerance."""

    name: str
    passed: bool
    margin: float
    tolerance: float
    seed: int
    details: dict = field(default_factory=dict)


def _report(name: str, defect: float, tolerance: float, seed: int, **details) -> CheckReport:
    clean = {k: _plain(v) for k, v in details.items()}
    clean["defect"] = float(defect)
    return CheckReport(name, bool(defect <= tolerance), float(tolerance - defect), float(tolerance), int(seed), clean)


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def with_datum(problem: ProblemInstance, datum) -> ProblemInstance:
    """The same problem with a replaced initial datum and refreshed constants."""
    bound, lip = pde_solver.datum_constants(datum, problem.half_width, problem.dim)
    return replace(problem, initial_datum=tuple(datum), datum_bound=bound, datum_lipschitz=lip)


class CosineDatum:
    """Random bounded Lipschitz datum: a short cosine sum plus an offset."""

    def __init__(self, amplitudes, frequencies, phases, offset=0.0):
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        self.frequencies = np.asarray(frequencies, dtype=float)
        self.phases = np.asarray(phases, dtype=float)
        self.offset = float(offset)

    def __call__(self, points):
        x = np.asarray(points, dtype=float)[..., 0]
        angles = np.multiply.outer(x, self.frequencies) + self.phases
        return np.cos(angles) @ self.amplitudes + self.offset


def random_lipschitz_pair(rng: np.random.Generator, m: int, ordered: bool):
    """Two random data tuples; the second dominates the first when ordered."""
    low = []
    high = []
    for _ in range(m):
        terms = 3
        amp = rng.uniform(0.1, 0.6, size=terms)
        freq = rng.uniform(0.3, 2.0, size=terms)
        phase = rng.uniform(0.0, 2 * np.pi, size=terms)
        low.append(CosineDatum(amp, freq, phase))
        if ordered:
            gap = float(rng.uniform(0.2, 1.0))
            high.append(CosineDatum(amp, freq, phase, offset=gap))
        else:
            amp2 = rng.uniform(0.1, 0.6, size=terms)
            freq2 = rng.uniform(0.3, 2.0, size=terms)
            phase2 = rng.uniform(0.0, 2 * np.pi, size=terms)
            high.append(CosineDatum(amp2, freq2, phase2))
    return tuple(low), tuple(high)


def _shared_operator_resolution(problems, res: Resolution) -> Resolution:
    """Pin q_max and the SL step so several solves share one discrete operator."""
    q_shared = max(pde_solver.problem_q_max(p, res) for p in problems)
    dt = pde_solver.sl_time_step(problems[0], res)
    return replace(res, q_max=q_shared, dt_sl=dt)


# ---------------------------------------------------------------------------
# deterministic scheme checks

def check_nonexpansive(problem: ProblemInstance, datum_a, datum_b, res: Resolution, seed: int = 0) -> CheckReport:
    """Sup-distance of two evolved data never grows, per step and end to end."""
    pa = with_datum(problem, datum_a)
    pb = with_datum(problem, datum_b)
    shared = _shared_operator_resolution((pa, pb), res)
    fa = pde_solver.solve_semilagrangian(pa, shared)
    fb = pde_solver.solve_semilagrangian(pb, shared)
    gaps = np.max(np.abs(fa.values - fb.values), axis=(1,) + tuple(range(2, fa.values.ndim)))
    growth = float(np.max(np.diff(gaps), initial=-np.inf))
    end_to_end = float(gaps[-1] - gaps[0])
    defect = max(growth, end_to_end)
    tol = 1e-12 * (1.0 + float(gaps[0]))
    return _report(
        "nonexpansive", defect, tol, seed,
        initial_gap=gaps[0], final_gap=gaps[-1], worst_step_growth=growth,
        dx=shared.dx, dt=fa.metadata["dt"],
    )


def check_comparison(
    problem: ProblemInstance, lower_datum, upper_datum, res: Resolution,
    seed: int = 0, _flip_coupling: bool = False,
) -> CheckReport:
    """Ordered data stay ordered at every node, and gaps never exceed the
    largest initial gap."""
    pl = with_datum(problem, lower_datum)
    pu = with_datum(problem, upper_datum)
    box = Box(np.full(problem.dim, problem.half_width), res.dx)
    initial_gap = pu.sample_datum(box) - pl.sample_datum(box)
    if initial_gap.min() < -1e-12:
        raise ValueError("comparison check needs ordered data")
    shared = _shared_operator_resolution((pl, pu), res)
    try:
        fl = pde_solver.solve_semilagrangian(pl, shared, _flip_coupling=_flip_coupling)
        fu = pde_solver.solve_semilagrangian(pu, shared, _flip_coupling=_flip_coupling)
    except HjswitchError as exc:
        return _report("comparison", float("inf"), 0.0, seed, witness={"error": str(exc)})
    diff = fu.values - fl.values
    order_defect = float(-diff.min())
    spread_defect = float(diff.max() - initial_gap.max())
    defect = max(order_defect, spread_defect)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(fl.values))))
    details = {"order_defect": order_defect, "spread_defect": spread_defect, "dx": shared.dx}
    if defect > tol:
        k, i, *node = np.unravel_index(int(np.argmin(diff)), diff.shape)
        details["witness"] = {
            "t": float(fl.times[k]), "component": int(i + 1),
            "x": [float(fl.box.axis(d)[node[d]]) for d in range(fl.box.dim)],
            "gap": float(diff[(k, i) + tuple(node)]),
        }
    return _report("comparison", defect, tol, seed, **details)


def check_semigroup(problem: ProblemInstance, t: float, s: float, res: Resolution, seed: int = 0) -> CheckReport:
    """One run to t+s versus restarting at t, on the guarded interior."""
    if t + s > problem.horizon + 1e-12:
        raise ValueError("need t + s within the horizon")
    shared = _shared_operator_resolution((problem,), res)
    full = pde_solver.solve_semilagrangian(replace(problem, horizon=t + s), shared)
    first = pde_solver.solve_semilagrangian(replace(problem, horizon=s), shared)
    restarted_problem = with_datum(replace(problem, horizon=t), pde_solver.datum_from_slice(first, s))
    restarted = pde_solver.solve_semilagrangian(restarted_problem, shared)
    q_max = pde_solver.problem_q_max(problem, shared)
    guard = problem.half_width - q_max * (t + s) - 0.5
    xs = np.linspace(-guard, guard, 41)
    gap = max(
        abs(evaluate(full, t + s, x, i) - evaluate(restarted, t, x, i))
        for x in xs
        for i in range(1, problem.m + 1)
    )
    dt = float(full.metadata["dt"])
    tol = 3.0 * (shared.dx + dt) * (1.0 + problem.kappa)
    return _report("semigroup", gap, tol, seed, t=t, s=s, dx=shared.dx, dt=dt, guard=guard)


def check_cross_validation(problem: ProblemInstance, res: Resolution, seed: int = 0) -> CheckReport:
    """The two schemes agree in sup norm on the guarded interior."""
    fd = pde_solver.solve_fd(problem, res)
    sl = pde_solver.solve_semilagrangian(problem, res)
    dt_coarse = max(float(fd.metadata["dt"]), float(sl.metadata["dt"]))
    guard = problem.half_width - pde_solver.problem_q_max(problem, res) * problem.horizon
    xs = np.linspace(-guard, guard, 61)
    times = np.linspace(0.0, problem.horizon, 5)[1:]
    gap = max(
        abs(evaluate(fd, t, x, i) - evaluate(sl, t, x, i))
        for t in times
        for x in xs
        for i in range(1, problem.m + 1)
    )
    tol = max(3.0 * res.dx, 3.0 * dt_coarse)
    return _report(
        "cross_validation", gap, tol, seed,
        dx=res.dx, dt_fd=fd.metadata["dt"], dt_sl=sl.metadata["dt"], guard=guard,
    )


def check_collapse_oracle(res: Resolution, seed: int = 0, horizon: float = 1.0) -> CheckReport:
    """Both schemes reproduce the scalar closed form x^2 / (2 (1 + t))."""
    coupling = validate([[1.0, -1.0], [-1.0, 1.0]])
    zero = models.QuadraticCosine(np.array([0.0]), np.array([1.0]), np.array([0.0]))
    family = models.HamiltonianFamily((zero, zero))
    datum = _CappedParabolaDatum(12.5)
    problem = pde_solver.build_problem(coupling, family, (datum, datum), horizon, 6.0)
    xs = np.linspace(-3.0, 3.0, 41)
    worst = 0.0
    for solver, tag in ((pde_solver.solve_fd, "fd"), (pde_solver.solve_semilagrangian, "sl")):
        fld = solver(problem, res)
        for x in xs:
            exact = x * x / (2.0 * (1.0 + horizon))
            for i in (1, 2):
                worst = max(worst, abs(evaluate(fld, horizon, x, i) - exact))
    return _report("collapse_oracle", worst, 3.0 * res.dx, seed, dx=res.dx)


class _CappedParabolaDatum:
    def __init__(self, cap):
        self.cap = cap

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        return np.minimum(0.5 * np.sum(pts * pts, axis=-1), self.cap)


def check_apriori_bounds(problem: ProblemInstance, res: Resolution, scheme: str, seed: int = 0) -> CheckReport:
    """The evolved field respects the value envelope at every node."""
    solver = pde_solver.solve_fd if scheme == "fd" else pde_solver.solve_semilagrangian
    fld = solver(problem, res)
    tol = pde_solver.scheme_tolerance(fld, problem)
    lower = np.inf
    upper = np.inf
    datum = fld.values[0]
    for k, t in enumerate(fld.times):
        push = transition_matrix(problem.coupling, float(t)).entries
        pushed = np.einsum("ij,j...->i...", push, datum)
        lower = min(lower, float(np.min(fld.values[k] - (-problem.datum_bound + t * problem.mu))))
        upper = min(upper, float(np.min(pushed + t * problem.rest_cost - fld.values[k])))
    defect = max(-lower, -upper)
    return _report(
        f"apriori_bounds_{scheme}", defect, tol, seed,
        lower_margin=lower, upper_margin=upper, mu=problem.mu, rest_cost=problem.rest_cost,
    )


# ---------------------------------------------------------------------------
# sub-optimality and the derivative formula

def _line_cost_integral(member, x0: np.ndarray, q: np.ndarray, a: float, b: float) -> float:
    """integral_a^b L(x0 + s q, -q) ds, exact for the cosine family."""
    span = b - a
    if span <= 0.0:
        return 0.0
    if isinstance(member, models.QuadraticCosine):
        kinetic = 0.5 * float(q @ q) * span
        total = kinetic
        for amp, k_vec, phase in zip(member.amplitudes, member.frequencies, member.phases):
            rate = float(k_vec @ q)
            base = float(k_vec @ x0) + phase
            if abs(rate) < 1e-14:
                total -= amp * np.cos(base) * span
            else:
                total -= amp * (np.sin(base + rate * b) - np.sin(base + rate * a)) / rate
        return float(total)
    s_grid = np.linspace(a, b, 129)
    pts = x0[None, :] + s_grid[:, None] * q[None, :]
    vals = member.lagrangian(pts, -q)
    return float(np.trapz(vals, s_grid))


def suboptimality_gap(
    field: GridField,
    problem: ProblemInstance,
    ensemble: markov.PathEnsemble,
    x,
    q,
    t0: float,
    h: float,
):
    """(lhs - rhs_mean, rhs standard error) for the sub-optimality inequality."""
    i = ensemble.initial_state
    x = np.atleast_1d(np.asarray(x, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    end = x + h * q
    lhs = evaluate(field, t0 + h, x, i) - float(
        push_vector(problem.coupling, h, field.vector_at(t0, end))[i - 1]
    )
    costs = np.empty(len(ensemble))
    for n, path in enumerate(ensemble.paths):
        cuts = [0.0] + [float(t) for t in path.jump_times if t < h] + [h]
        total = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b > a:
                member = problem.lagrangians.member(markov.state_at(path, a))
                total += _line_cost_integral(member, x, q, a, b)
        costs[n] = total
    stderr = float(costs.std(ddof=1) / np.sqrt(len(costs))) if len(costs) > 1 else 0.0
    return lhs - float(costs.mean()), stderr


def check_suboptimality(
    field: GridField,
    problem: ProblemInstance,
    ensembles: dict,
    res: Resolution,
    seed: int = 0,
    trials: int = 20,
) -> CheckReport:
    """Expected running cost dominates value increments along straight lines.

    Also asserts the literal one-step discrete form: the semi-Lagrangian
    update never exceeds any constant-velocity candidate on its own lattice.
    """
    rng = _check_rng(seed, "suboptimality")
    dt = float(field.metadata["dt"])
    worst = -np.inf
    configs = []
    for _ in range(trials):
        i = int(rng.integers(1, problem.m + 1))
        x = float(rng.uniform(-1.5, 1.5))
        q = float(rng.uniform(-2.0, 2.0))
        t0 = float(rng.uniform(0.0, 0.5 * problem.horizon))
        h = float(rng.uniform(0.05, min(0.4, problem.horizon - t0 - 1e-9)))
        gap, stderr = suboptimality_gap(field, problem, ensembles[i], x, q, t0, h)
        defect = gap - 3.0 * stderr
        configs.append({"i": i, "x": x, "q": q, "t0": t0, "h": h, "gap": gap, "stderr": stderr})
        worst = max(worst, defect)
    tol = (res.dx + dt) * (1.0 + problem.kappa)
    one_step = _discrete_one_step_defect(field, problem)
    defect = worst if one_step <= 1e-9 else max(worst, tol + one_step)
    return _report(
        "suboptimality", defect, tol, seed,
        one_step_defect=one_step, trials=configs[:5], dt=dt,
    )


def _discrete_one_step_defect(field: GridField, problem: ProblemInstance) -> float:
    """u(t+dt, x) <= dt L(x, -q) + push(u(t, .))(x + dt q), exact per step."""
    dt = float(field.times[1] - field.times[0])
    push = transition_matrix(problem.coupling, dt).entries
    dv = float(field.metadata.get("dv", field.metadata["dx"] / dt))
    worst = -np.inf
    mid = field.times.size // 2
    prev = field.values[mid]
    nxt = field.values[mid + 1]
    pushed = np.einsum("ij,j...->i...", push, prev)
    box = field.box
    for q1 in (-2.0 * dv, 0.0, dv, 3.0 * dv):
        q = np.full(box.dim, 0.0)
        q[0] = q1
        for i in range(problem.m):
            member = problem.lagrangians.member(i + 1)
            shifted = box.shift_linear(pushed[i], dt * q)
            nodes = box.node_mesh()
            cand = dt * member.lagrangian(nodes, -q) + shifted
            interior = (slice(2, -2),) * box.dim
            worst = max(worst, float(np.max(nxt[i][interior] - cand[interior])))
    return worst


def synthetic_field(box: Box, times: np.ndarray, components) -> GridField:
    """Tabulate closed-form space-time callables into a GridField."""
    mesh = box.node_mesh().reshape(-1, box.dim)
    values = np.stack(
        [
            np.stack([np.asarray(f(t, mesh), dtype=float).reshape(box.shape) for f in components])
            for t in times
        ]
    )
    meta = {"scheme": "synthetic", "dx": box.spacing, "dt": float(times[1] - times[0]),
            "m": len(components), "dim": box.dim, "X": float(box.half_widths[0]),
            "T": float(times[-1])}
    return GridField(box, np.asarray(times, dtype=float), values, meta)


def derivative_formula_errors(
    field: GridField, coupling: CouplingMatrix, x0, q, i: int, h_values
) -> np.ndarray:
    """|finite difference - closed-form right side| for each step size."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    base = field.vector_at(0.0, x0)
    t1 = float(field.times[1])
    time_grad = (field.vector_at(t1, x0)[i - 1] - base[i - 1]) / t1
    space_grad = field.gradient_at(0.0, x0, i)
    rhs = -float((coupling.entries @ base)[i - 1]) + float(time_grad) + float(space_grad @ q)
    errs = []
    for h in h_values:
        moved = field.vector_at(float(h), x0 + float(h) * q)
        fd = (float(push_vector(coupling, float(h), moved)[i - 1]) - float(base[i - 1])) / float(h)
        errs.append(abs(fd - rhs))
    return np.asarray(errs)


def check_derivative_formula(res: Resolution, seed: int = 0) -> CheckReport:
    """Expectation derivative along a moving point: order >= 0.9 under halving.

    Uses the hand-computable instance u = (x, -x) with the symmetric
    two-state coupling and the unit-speed line.
    """
    coupling = validate([[1.0, -1.0], [-1.0, 1.0]])
    box = Box(np.array([4.0]), res.dx)
    times = np.linspace(0.0, 0.5, 11)
    fld = synthetic_field(
        box, times, (lambda t, pts: pts[:, 0], lambda t, pts: -pts[:, 0])
    )
    h_values = 0.2 / 2.0 ** np.arange(5)
    errs = derivative_formula_errors(fld, coupling, 0.0, 1.0, 1, h_values)
    orders = np.log2(errs[:-1] / errs[1:])
    order = float(orders.mean())
    defect = 0.9 - order
    return _report(
        "derivative_formula", defect, 0.0, seed,
        order=order, errors=errs, h_values=np.asarray(h_values),
    )


# ---------------------------------------------------------------------------
# statistical checks

def check_markov_statistics(
    coupling: CouplingMatrix, horizon: float, n_paths: int, seed: int = 0
) -> CheckReport:
    """State laws, shift push-forward, mismatch bound, Markov factorization."""

    def run(count: int, seed_now: int) -> tuple[float, dict]:
        worst = -np.inf
        details: dict = {}
        mismatch_rate = coupling.m**2 * coupling.max_abs_entry
        for i in range(1, coupling.m + 1):
            ens = markov.sample_ensemble(coupling, i, horizon, count, master_seed=seed_now + i)
            for frac in (0.25, 0.5, 1.0):
                t = frac * horizon
                law = markov.empirical_state_law(ens, t)
                predicted = markov.predicted_state_law(coupling, i, t)
                sig = 3.0 * np.sqrt(np.maximum(predicted * (1 - predicted), 1e-12) / count)
                worst = max(worst, float(np.max(np.abs(law - predicted) - sig)))
            h = 0.3 * horizon
            shifted_counts = np.zeros(coupling.m)
            for p in ens.paths:
                shifted_counts[markov.shift(p, h).initial_state - 1] += 1
            law = shifted_counts / count
            predicted = markov.predicted_state_law(coupling, i, h)
            sig = 3.0 * np.sqrt(np.maximum(predicted * (1 - predicted), 1e-12) / count)
            worst = max(worst, float(np.max(np.abs(law - predicted) - sig)))
            for t1, t2 in ((0.2 * horizon, 0.5 * horizon), (0.5 * horizon, 0.55 * horizon)):
                freq = markov.mismatch_probability(ens, t1, t2)
                bound = min(mismatch_rate * (t2 - t1), 1.0)
                sig = 3.0 * np.sqrt(max(bound * (1 - bound), 1e-12) / count)
                worst = max(worst, freq - bound - sig)
            s, t = 0.3 * horizon, 0.8 * horizon
            step_s = transition_matrix(coupling, s).entries
            step_st = transition_matrix(coupling, t - s).entries
            for k in range(1, coupling.m + 1):
                for j in range(1, coupling.m + 1):
                    freq = markov.cylinder_frequency(ens, [s, t], [k, j])
                    predicted = step_s[i - 1, k - 1] * step_st[k - 1, j - 1]
                    sig = 3.0 * np.sqrt(max(predicted * (1 - predicted), 1e-12) / count)
                    worst = max(worst, abs(freq - predicted) - sig)
        details["paths_per_state"] = count
        return worst, details

    defect, details = run(n_paths, seed)
    if defect > 0.0:
        defect, details = run(4 * n_paths, 2 * seed + 1)
        details["retried"] = True
    return _report("markov_statistics", defect, 0.0, seed, **details)


def check_butterfly(
    field: GridField,
    problem: ProblemInstance,
    points,
    n_paths: int,
    res: Resolution,
    seed: int = 0,
    workers: int = 1,
) -> CheckReport:
    """Expected action of the constructed curves reproduces the PDE value."""
    dt_dp = pde_solver.dp_time_step(problem, res)
    tol = 5.0 * (res.dx + dt_dp)

    def run(count: int, seed_now: int) -> tuple[float, list]:
        worst = -np.inf
        rows = []
        for i in range(1, problem.m + 1):
            ens = markov.sample_ensemble(problem.coupling, i, problem.horizon, count, master_seed=seed_now + i)
            for x in points:
                est = random_minimizer.expected_action(field, problem, ens, x, i, res, workers=workers)
                pde_value = evaluate(field, problem.horizon, x, i)
                gap = abs(est.mean - pde_value)
                defect = gap - 3.0 * est.std_error
                rows.append({
                    "i": i, "x": float(x), "mean": est.mean, "std_error": est.std_error,
                    "pde_value": pde_value, "gap": gap,
                })
                worst = max(worst, defect)
        return worst, rows

    defect, rows = run(n_paths, seed)
    retried = False
    if defect > tol:
        defect, rows = run(4 * n_paths, 2 * seed + 1)
        retried = True
    return _report(
        "butterfly", defect, tol, seed,
        rows=rows, paths=n_paths, retried=retried, dt_dp=dt_dp,
    )


def constant_curve_action(problem: ProblemInstance, path: markov.IndexPath, x) -> float:
    """Original action of the curve resting at x; a crude admissible family."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    horizon = problem.horizon
    total = float(problem.initial_datum[markov.state_at(path, horizon) - 1](x[None, :])[0])
    cuts = [0.0] + [float(t) for t in path.jump_times if t < horizon] + [horizon]
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b > a:
            member = problem.lagrangians.member(markov.state_at(path, a))
            total += (b - a) * float(member.lagrangian(x, np.zeros(problem.dim)))
    return total


def check_ordering_chain(
    field: GridField,
    problem: ProblemInstance,
    points,
    n_paths: int,
    res: Resolution,
    seed: int = 0,
    workers: int = 1,
) -> CheckReport:
    """relaxed bound <= PDE value <= resting-curve expectation, with slack."""
    dt_dp = pde_solver.dp_time_step(problem, res)
    tol = 5.0 * (res.dx + dt_dp)

    def run(count: int, seed_now: int) -> tuple[float, list]:
        worst = -np.inf
        rows = []
        for i in range(1, problem.m + 1):
            ens = markov.sample_ensemble(problem.coupling, i, problem.horizon, count, master_seed=seed_now + i)
            for x in points:
                lower = random_minimizer.relaxation_lower_bound(problem, ens, x, i, res, workers=workers)
                rest = np.asarray([constant_curve_action(problem, p, x) for p in ens.paths])
                rest_err = float(rest.std(ddof=1) / np.sqrt(rest.size))
                pde_value = evaluate(field, problem.horizon, x, i)
                low_defect = lower.mean - pde_value - 3.0 * lower.std_error
                high_defect = pde_value - float(rest.mean()) - 3.0 * rest_err
                rows.append({
                    "i": i, "x": float(x), "lower_mean": lower.mean,
                    "pde_value": pde_value, "rest_mean": float(rest.mean()),
                })
                worst = max(worst, low_defect, high_defect)
        return worst, rows

    defect, rows = run(n_paths, seed)
    retried = False
    if defect > tol:
        defect, rows = run(4 * n_paths, 2 * seed + 1)
        retried = True
    return _report("ordering_chain", defect, tol, seed, rows=rows, retried=retried)


def check_calibration(
    field: GridField,
    problem: ProblemInstance,
    n_paths: int,
    res: Resolution,
    seed: int = 0,
) -> CheckReport:
    """Per-interval calibration residual across sampled paths."""
    rng = _check_rng(seed, "calibration")
    dt_dp = pde_solver.dp_time_step(problem, res)
    engine = random_minimizer.MinimizerEngine(field, problem, res)
    worst = 0.0
    for n in range(n_paths):
        i = int(rng.integers(1, problem.m + 1))
        x = float(rng.uniform(-1.5, 1.5))
        path = markov.sample_path(problem.coupling, i, problem.horizon, markov.path_rng(seed + 101, n))
        sample = engine.construct(path, x)
        worst = max(worst, random_minimizer.per_interval_calibration(sample, field, problem))
    tol = 5.0 * (res.dx + dt_dp) * (1.0 + problem.kappa)
    return _report("calibration", worst, tol, seed, paths=n_paths, dt_dp=dt_dp)


def check_dynamics(
    field: GridField,
    problem: ProblemInstance,
    n_paths: int,
    res: Resolution,
    seed: int = 0,
) -> CheckReport:
    """Velocity identity exactly; momentum-law residual median within bound."""
    rng = _check_rng(seed, "dynamics")
    dt_dp = pde_solver.dp_time_step(problem, res)
    engine = random_minimizer.MinimizerEngine(field, problem, res)
    vel_worst = 0.0
    pooled = []
    excluded = 0
    for n in range(n_paths):
        i = int(rng.integers(1, problem.m + 1))
        x = float(rng.uniform(-1.2, 1.2))
        path = markov.sample_path(problem.coupling, i, problem.horizon, markov.path_rng(seed + 202, n))
        sample = engine.construct(path, x)
        adjoint = random_minimizer.adjoint_curve(sample, problem.lagrangians)
        report = random_minimizer.dynamics_residual(sample, adjoint, field, problem)
        vel_worst = max(vel_worst, report.velocity_residual_max)
        pooled.extend(report.momentum_residuals.tolist())
        excluded += report.excluded_points
    median = float(np.median(pooled)) if pooled else 0.0
    tol = 10.0 * (res.dx + dt_dp)
    defect = median if vel_worst <= 1e-10 else max(median, tol + vel_worst)
    return _report(
        "dynamics", defect, tol, seed,
        velocity_residual_max=vel_worst, momentum_median=median,
        smooth_points=len(pooled), excluded_points=excluded,
    )


def measured_semiconcavity_constant(problem: ProblemInstance, q_range: float, step: float = 0.05) -> float:
    """Largest axiswise curvature of any member Lagrangian on the sampled range."""
    xs = np.arange(-problem.half_width, problem.half_width + 1e-9, 0.25)
    qs = np.arange(-q_range, q_range + 1e-9, 0.25)
    worst = 0.0
    for member in problem.lagrangians.members:
        for d in range(problem.dim):
            e = np.zeros(problem.dim)
            e[d] = step
            for q in qs:
                q_vec = np.full(problem.dim, 0.0)
                q_vec[0] = q
                pts = np.zeros((xs.size, problem.dim))
                pts[:, 0] = xs
                second_x = (
                    member.lagrangian(pts + e, q_vec)
                    + member.lagrangian(pts - e, q_vec)
                    - 2.0 * member.lagrangian(pts, q_vec)
                ) / step**2
                second_q = (
                    member.lagrangian(pts, q_vec + e)
                    + member.lagrangian(pts, q_vec - e)
                    - 2.0 * member.lagrangian(pts, q_vec)
                ) / step**2
                worst = max(worst, float(np.max(second_x)), float(np.max(second_q)))
    return 0.5 * worst


def check_semiconcavity(
    field: GridField,
    problem: ProblemInstance,
    res: Resolution,
    times=(0.25, 0.5, 1.0),
    max_offset: float = 0.5,
    seed: int = 0,
) -> CheckReport:
    """Second differences obey the 2 C (t/3 + 1/t) |z|^2 regularization bound."""
    q_max = pde_solver.problem_q_max(problem, res)
    constant = measured_semiconcavity_constant(problem, q_max)
    dx = field.box.spacing
    guard = problem.half_width - q_max * problem.horizon - max_offset
    axis = field.box.axis(0)
    interior = np.abs(axis) <= guard
    offsets = np.arange(1, int(max_offset / dx) + 1)
    worst = -np.inf
    for t in times:
        if t > problem.horizon + 1e-12:
            continue
        sl = field.slice_at(float(t))
        factor = 2.0 * constant * (t / 3.0 + 1.0 / t)
        for i in range(problem.m):
            line = sl[i] if field.box.dim == 1 else sl[i][:, sl.shape[-1] // 2]
            for k in offsets:
                z = k * dx
                second = line[2 * k:] + line[:-2 * k] - 2.0 * line[k:-k]
                keep = interior[k:-k]
                worst = max(worst, float(np.max(second[keep] - factor * z * z)))
    tol = 5.0 * (res.dx + float(field.metadata["dt"]))
    return _report(
        "semiconcavity", worst, tol, seed,
        constant=constant, times=list(times), max_offset=max_offset,
    )


# ---------------------------------------------------------------------------
# the full suite

@dataclass(frozen=True)
class VerificationBudget:
    """Sample sizes and resolution for a full verification run."""

    resolution: Resolution
    markov_paths: int = 20_000
    mc_paths: int = 800
    calibration_paths: int = 40
    dynamics_paths: int = 8
    points: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    seed: int = 0
    workers: int = 1


def run_all(problem: ProblemInstance, budget: VerificationBudget) -> list:
    """Execute every check at the given budget; deterministic given the seed."""
    res = budget.resolution
    seed = budget.seed
    rng = _check_rng(seed, "run_all")
    sl_field = pde_solver.solve_semilagrangian(problem, res)
    ensembles = {
        i: markov.sample_ensemble(problem.coupling, i, problem.horizon,
                                  max(200, budget.mc_paths // 4), master_seed=seed + 7 * i)
        for i in range(1, problem.m + 1)
    }
    pair_plain = random_lipschitz_pair(rng, problem.m, ordered=False)
    pair_ordered = random_lipschitz_pair(rng, problem.m, ordered=True)
    reports = [
        _guarded(check_markov_statistics, "markov_statistics", seed,
                 problem.coupling, problem.horizon, budget.markov_paths, seed),
        _guarded(check_apriori_bounds, "apriori_bounds_fd", seed, problem, res, "fd", seed),
        _guarded(check_apriori_bounds, "apriori_bounds_sl", seed, problem, res, "sl", seed),
        _guarded(check_cross_validation, "cross_validation", seed, problem, res, seed),
        _guarded(check_collapse_oracle, "collapse_oracle", seed, res, seed),
        _guarded(check_nonexpansive, "nonexpansive", seed, problem, pair_plain[0], pair_plain[1], res, seed),
        _guarded(check_comparison, "comparison", seed, problem, pair_ordered[0], pair_ordered[1], res, seed),
        _guarded(check_semigroup, "semigroup", seed,
                 problem, 0.5 * problem.horizon, 0.5 * problem.horizon, res, seed),
        _guarded(check_suboptimality, "suboptimality", seed, sl_field, problem, ensembles, res, seed),
        _guarded(check_derivative_formula, "derivative_formula", seed, res, seed),
        _guarded(check_butterfly, "butterfly", seed,
                 sl_field, problem, budget.points, budget.mc_paths, res, seed, budget.workers),
        _guarded(check_ordering_chain, "ordering_chain", seed,
                 sl_field, problem, budget.points, max(100, budget.mc_paths // 4), res, seed, budget.workers),
        _guarded(check_calibration, "calibration", seed,
                 sl_field, problem, budget.calibration_paths, res, seed),
        _guarded(check_dynamics, "dynamics", seed, sl_field, problem, budget.dynamics_paths, res, seed),
        _guarded(check_semiconcavity, "semiconcavity", seed, sl_field, problem, res, seed=seed),
    ]
    return sorted(reports, key=lambda r: r.name)


def _guarded(fn, name: str, fallback_seed: int, *args, **kwargs) -> CheckReport:
    try:
        return fn(*args, **kwargs)
    except HjswitchError as exc:
        return CheckReport(name, False, float("-inf"), 0.0, fallback_seed, {"error": str(exc)})


def reports_to_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], sort_keys=True, indent=2)


def reports_table(reports) -> str:
    lines = [f"{'check':24s} {'status':6s} {'margin':>12s} {'tolerance':>12s}"]
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:24s} {status:6s} {r.margin:12.4g} {r.tolerance:12.4g}")
    return "\n".join(lines)
