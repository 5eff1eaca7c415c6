"""Two independent discrete semigroups for the weakly coupled system.

``solve_fd`` advances an explicit Lax-Friedrichs discretization of

    d_t u_i + H_i(x, D_x u_i) + (B u)_i = 0

with the coupling term taken explicitly at the current level.  It is monotone
under the recorded CFL bound dt <= dx / (2 sigma), sigma being the largest
momentum gradient of any Hamiltonian over the active range, with an extra cap
dt * max_rate(B) <= 1/2 for the coupling part.

``solve_semilagrangian`` advances the dynamic-programming form

    u_i(t + dt, x) = min_v [ dt L_i(x, v) + (exp(-dt B) u(t, .))_i (x - dt v) ]

over a uniform velocity lattice; the coupling enters only through the
stochastic matrix applied to the interpolated vector of values, so each step
is nonexpansive and monotone by construction.

Both schemes work on a truncated box with constant extension beyond the
boundary; queries should stay inside the finite-speed-of-propagation region.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .coupling import CouplingMatrix, raw_expm, transition_matrix
from .errors import BlowUp, BoundViolated, CFLViolated, OutOfDomain, VelocityRangeExceeded
from .grids import Box, lattice_boundary_mask, velocity_lattice

COUPLING_CFL_FRACTION = 0.49  # dt * max jump rate stays below this


# ---------------------------------------------------------------------------
# grid fields

@dataclass(frozen=True)
class GridField:
    """Discrete space-time field u(t_k, x) of m components on a box."""

    box: Box
    times: np.ndarray
    values: np.ndarray  # (K+1, m, *box.shape)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid field holds non-finite values")
        if self.values.shape[0] != self.times.size:
            raise ValueError("one value slice per time level required")
        if self.values.shape[2:] != self.box.shape:
            raise ValueError("value slices must match the box shape")

    @property
    def m(self) -> int:
        return int(self.values.shape[1])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def _time_weights(self, t: float):
        if t < self.times[0] - 1e-9 or t > self.times[-1] + 1e-9:
            raise OutOfDomain(f"t = {t} outside [{self.times[0]}, {self.times[-1]}]")
        t = min(max(t, self.times[0]), self.times[-1])
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), self.times.size - 2)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, float(np.clip(w, 0.0, 1.0))

    def slice_at(self, t: float) -> np.ndarray:
        """Time-interpolated (m, *shape) slice."""
        k, w = self._time_weights(t)
        if w == 0.0:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def vector_at(self, t: float, x) -> np.ndarray:
        """All m components at one space-time point."""
        pt = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.box.contains(pt):
            raise OutOfDomain(f"x = {pt} outside the box")
        return np.asarray(self.box.interpolate(self.slice_at(t), pt))

    def gradient_at(self, t: float, x, i: int) -> np.ndarray:
        """Centered grid gradient of component i interpolated at (t, x)."""
        sl = self.slice_at(t)[i - 1]
        grads = np.gradient(sl, self.box.spacing)
        if self.box.dim == 1:
            grads = [grads]
        pt = np.atleast_1d(np.asarray(x, dtype=float))
        return np.asarray([float(self.box.interpolate(g, pt)) for g in grads])

    def second_difference_at(self, t: float, x, i: int) -> float:
        """Largest-axis centered second difference at the nearest node."""
        sl = self.slice_at(t)[i - 1]
        pt = np.atleast_1d(np.asarray(x, dtype=float))
        idx = tuple(
            int(np.clip(np.round((pt[d] + self.box.half_widths[d]) / self.box.spacing), 1, self.box.shape[d] - 2))
            for d in range(self.box.dim)
        )
        out = 0.0
        for d in range(self.box.dim):
            lo = list(idx)
            hi = list(idx)
            lo[d] -= 1
            hi[d] += 1
            out = max(out, abs(sl[tuple(hi)] - 2.0 * sl[tuple(idx)] + sl[tuple(lo)]))
        return out

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(format_metadata(self.metadata))
            cols = "t,x,i,u" if self.box.dim == 1 else "t,x,y,i,u"
            fh.write(cols + "\n")
            mesh = self.box.node_mesh().reshape(-1, self.box.dim)
            for k, t in enumerate(self.times):
                for i in range(self.m):
                    flat = self.values[k, i].ravel()
                    for node, val in zip(mesh, flat):
                        coords = ",".join(f"{float(c)!r}" for c in node)
                        fh.write(f"{float(t)!r},{coords},{i + 1},{float(val)!r}\n")


def format_metadata(meta: dict) -> str:
    parts = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
    return f"# {parts}\n" if parts else "#\n"


def parse_metadata(line: str) -> dict:
    out = {}
    for part in line.lstrip("#").split():
        key, _, val = part.partition("=")
        try:
            out[key] = int(val) if val.isdigit() or (val.startswith("-") and val[1:].isdigit()) else float(val)
        except ValueError:
            out[key] = val
    return out


def load_field_csv(path: str) -> GridField:
    with open(path, encoding="ascii") as fh:
        meta = parse_metadata(fh.readline())
        fh.readline()  # column header
        data = np.loadtxt(io.StringIO(fh.read()), delimiter=",")
    dim = int(meta.get("dim", 1))
    box = Box(np.full(dim, float(meta["X"])), float(meta["dx"]))
    m = int(meta["m"])
    times = np.unique(data[:, 0])
    n_nodes = int(np.prod(box.shape))
    expected = times.size * m * n_nodes
    if data.shape[0] != expected:
        raise ValueError(f"field CSV holds {data.shape[0]} rows, expected {expected}")
    values = data[:, -1].reshape(times.size, m, *box.shape)
    return GridField(box, times, values, meta)


# ---------------------------------------------------------------------------
# problems and resolutions

@dataclass(frozen=True)
class ProblemInstance:
    """One full problem: coupling, models, initial datum, horizon, box size."""

    coupling: CouplingMatrix
    hamiltonians: models.HamiltonianFamily
    lagrangians: models.LagrangianFamily
    initial_datum: tuple
    horizon: float
    half_width: float
    datum_bound: float
    datum_lipschitz: float
    label: str = ""

    def __post_init__(self):
        if len(self.initial_datum) != self.coupling.m or self.hamiltonians.m != self.coupling.m:
            raise ValueError("component counts of coupling, models, and datum must agree")
        if self.horizon <= 0.0 or self.half_width <= 0.0:
            raise ValueError("horizon and half width must be positive")

    @property
    def m(self) -> int:
        return self.coupling.m

    @property
    def dim(self) -> int:
        return self.hamiltonians.dim

    @property
    def kappa(self) -> float:
        """A-priori Lipschitz estimate: datum slope plus accumulated forcing."""
        return self.datum_lipschitz + self.horizon * self.hamiltonians.x_gradient_bound()

    @property
    def velocity_ceiling(self) -> float:
        """Largest |d_p H| over the active momentum range |p| <= kappa + 1."""
        return self.hamiltonians.velocity_bound(self.kappa + 1.0)

    @property
    def mu(self) -> float:
        return self.lagrangians.lower_bound()

    @property
    def rest_cost(self) -> float:
        return self.lagrangians.rest_value_sup()

    def sample_datum(self, box: Box) -> np.ndarray:
        mesh = box.node_mesh().reshape(-1, box.dim)
        out = np.stack([np.asarray(f(mesh), dtype=float).reshape(box.shape) for f in self.initial_datum])
        if not np.all(np.isfinite(out)):
            raise ValueError("initial datum produced non-finite values")
        return out


def datum_constants(callables, half_width: float, dim: int, probe_step: float = 0.005):
    """Sampled sup norm and Lipschitz constant of an initial datum."""
    box = Box(np.full(dim, half_width), max(probe_step, half_width / 2000.0))
    mesh = box.node_mesh()
    bound = 0.0
    lip = 0.0
    for f in callables:
        vals = np.asarray(f(mesh.reshape(-1, dim)), dtype=float).reshape(box.shape)
        bound = max(bound, float(np.max(np.abs(vals))))
        for d in range(dim):
            lip = max(lip, float(np.max(np.abs(np.diff(vals, axis=d)))) / box.spacing)
    return bound, lip


def build_problem(coupling, hamiltonians, initial_datum, horizon, half_width,
                  q_max: float | None = None, label: str = "") -> ProblemInstance:
    """Assemble a ProblemInstance, deriving Lagrangians and datum constants."""
    bound, lip = datum_constants(initial_datum, half_width, hamiltonians.dim)
    probe = ProblemInstance(
        coupling, hamiltonians, models.LagrangianFamily(hamiltonians.members),
        tuple(initial_datum), horizon, half_width, bound, lip, label,
    )
    ceiling = q_max if q_max is not None else probe.velocity_ceiling
    lagrangians = models.build_lagrangians(hamiltonians, q_max=ceiling)
    return replace(probe, lagrangians=lagrangians)


@dataclass(frozen=True)
class Resolution:
    """Step sizes; unset entries are derived from the problem at solve time.

    dt_sl defaults to dx^(2/3) and the velocity lattice spacing is dx/dt for
    each dynamic-programming style scheme, so consecutive candidate foot
    points are one grid cell apart.  dt_dp defaults to sqrt(dx).
    """

    dx: float
    dt_fd: float | None = None
    dt_sl: float | None = None
    dt_dp: float | None = None
    q_max: float | None = None

    def refined(self, factor: float = 2.0) -> "Resolution":
        scale = 1.0 / factor
        return Resolution(
            self.dx * scale,
            None if self.dt_fd is None else self.dt_fd * scale,
            None if self.dt_sl is None else self.dt_sl * scale,
            None if self.dt_dp is None else self.dt_dp * scale,
            self.q_max,
        )


def problem_q_max(problem: ProblemInstance, res: Resolution) -> float:
    return res.q_max if res.q_max is not None else problem.velocity_ceiling


def cfl_bound(problem: ProblemInstance, res: Resolution) -> float:
    sigma = problem_q_max(problem, res)
    bound = res.dx / (2.0 * sigma)
    rate = problem.coupling.max_rate
    if rate > 0.0:
        bound = min(bound, COUPLING_CFL_FRACTION / rate)
    return bound


def _steps(horizon: float, dt_req: float) -> tuple[int, float]:
    count = max(1, int(np.ceil(horizon / dt_req - 1e-12)))
    return count, horizon / count


def fd_time_step(problem: ProblemInstance, res: Resolution) -> float:
    requested = res.dt_fd if res.dt_fd is not None else cfl_bound(problem, res)
    return _steps(problem.horizon, requested)[1]


def sl_time_step(problem: ProblemInstance, res: Resolution) -> float:
    requested = res.dt_sl if res.dt_sl is not None else res.dx ** (2.0 / 3.0)
    return _steps(problem.horizon, requested)[1]


def dp_time_step(problem: ProblemInstance, res: Resolution) -> float:
    requested = res.dt_dp if res.dt_dp is not None else np.sqrt(res.dx)
    return _steps(problem.horizon, requested)[1]


def _base_metadata(problem: ProblemInstance, res: Resolution) -> dict:
    return {
        "m": problem.m,
        "dim": problem.dim,
        "X": problem.half_width,
        "T": problem.horizon,
        "dx": res.dx,
        "kappa": problem.kappa,
        "q_max": problem_q_max(problem, res),
        "mu": problem.mu,
        "M": problem.rest_cost,
        "u0_bound": problem.datum_bound,
        "u0_lipschitz": problem.datum_lipschitz,
    }


class _NodeLagrangian:
    """L_i(nodes, v) for many lattice velocities with shared precomputation."""

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
        return self.member.lagrangian(self.nodes_mesh, v)


def _apriori_envelope(problem: ProblemInstance) -> tuple[float, float]:
    """Crude global floor/ceiling used for the in-loop blow-up guard."""
    low = -problem.datum_bound + problem.horizon * min(problem.mu, 0.0)
    high = problem.datum_bound + problem.horizon * max(problem.rest_cost, 0.0)
    slack = 0.1 * (abs(low) + abs(high) + 1.0)
    return low - slack, high + slack


def solve_fd(problem: ProblemInstance, res: Resolution) -> GridField:
    """Explicit Lax-Friedrichs stepping with explicit coupling."""
    bound = cfl_bound(problem, res)
    dt = fd_time_step(problem, res)
    if dt > bound * (1.0 + 1e-9):
        raise CFLViolated(f"dt = {dt:.4g} exceeds the CFL bound {bound:.4g}")
    box = Box(np.full(problem.dim, problem.half_width), res.dx)
    steps, dt = _steps(problem.horizon, dt)
    sigma = problem_q_max(problem, res)
    nodes = box.node_mesh()
    u = problem.sample_datum(box)
    slices = [u.copy()]
    b_entries = problem.coupling.entries
    floor, ceiling = _apriori_envelope(problem)
    members = problem.hamiltonians.members
    dx = res.dx
    for n in range(steps):
        coupling_term = np.einsum("ij,j...->i...", b_entries, u)
        new = np.empty_like(u)
        for i, member in enumerate(members):
            diff_plus = []
            diff_minus = []
            for d in range(problem.dim):
                ax = d  # component axis removed: u[i] has shape box.shape
                up = np.concatenate([u[i].take(range(1, box.shape[d]), axis=ax),
                                     u[i].take([-1], axis=ax)], axis=ax)
                down = np.concatenate([u[i].take([0], axis=ax),
                                       u[i].take(range(0, box.shape[d] - 1), axis=ax)], axis=ax)
                diff_plus.append((up - u[i]) / dx)
                diff_minus.append((u[i] - down) / dx)
            p_avg = np.stack([(dp + dm) / 2.0 for dp, dm in zip(diff_plus, diff_minus)], axis=-1)
            ham = member.hamiltonian(nodes, p_avg)
            for dp, dm in zip(diff_plus, diff_minus):
                ham = ham - 0.5 * sigma * (dp - dm)
            new[i] = u[i] - dt * (ham + coupling_term[i])
        u = new
        worst_low = float(u.min())
        worst_high = float(u.max())
        if worst_low < floor or worst_high > ceiling:
            raise BlowUp(
                f"step {n + 1}: values in [{worst_low:.4g}, {worst_high:.4g}] escape "
                f"the a-priori envelope [{floor:.4g}, {ceiling:.4g}]"
            )
        slices.append(u.copy())
    times = dt * np.arange(steps + 1)
    meta = _base_metadata(problem, res)
    meta.update({"scheme": "fd", "dt": dt, "cfl": bound, "sigma": sigma})
    return GridField(box, times, np.stack(slices), meta)


def solve_semilagrangian(problem: ProblemInstance, res: Resolution, _flip_coupling: bool = False) -> GridField:
    """Coupled dynamic-programming stepping on a velocity lattice.

    ``_flip_coupling`` is a mutation hook for the verification suite: it
    replaces the stochastic push by the wrong-sign exponential, which must
    make the comparison check fail.
    """
    dt = sl_time_step(problem, res)
    box = Box(np.full(problem.dim, problem.half_width), res.dx)
    steps, dt = _steps(problem.horizon, dt)
    q_max = problem_q_max(problem, res)
    dv = res.dx / dt
    lattice = velocity_lattice(q_max, dv, problem.dim)
    boundary = lattice_boundary_mask(lattice)
    nodes = box.node_mesh()
    node_lag = [_NodeLagrangian(mem, nodes) for mem in problem.lagrangians.members]
    if _flip_coupling:
        push = raw_expm(dt * problem.coupling.entries)
    else:
        push = transition_matrix(problem.coupling, dt).entries
    u = problem.sample_datum(box)
    slices = [u.copy()]
    for _ in range(steps):
        pushed = np.einsum("ij,j...->i...", push, u)
        best = np.full(u.shape, np.inf)
        best_idx = np.zeros(u.shape, dtype=np.int32)
        for v_idx, v in enumerate(lattice):
            shifted = box.shift_linear(pushed, -dt * v)
            for i in range(problem.m):
                cand = dt * node_lag[i].at(v) + shifted[i]
                take = cand < best[i]
                best[i][take] = cand[take]
                best_idx[i][take] = v_idx
        if boundary[best_idx].any():
            raise VelocityRangeExceeded(
                "semi-Lagrangian argmin attained on the velocity lattice boundary; raise q_max"
            )
        u = best
        slices.append(u.copy())
    times = dt * np.arange(steps + 1)
    meta = _base_metadata(problem, res)
    meta.update({"scheme": "sl", "dt": dt, "dv": dv, "lattice": lattice.shape[0]})
    return GridField(box, times, np.stack(slices), meta)


def evaluate(field: GridField, t: float, x, i: int) -> float:
    """Component i (1-based) at (t, x); multilinear in space, linear in time."""
    if not 1 <= i <= field.m:
        raise OutOfDomain(f"component {i} outside 1..{field.m}")
    return float(field.vector_at(t, x)[i - 1])


@dataclass(frozen=True)
class BoundsReport:
    """Worst slack of the two a-priori inequalities over all nodes and times."""

    lower_margin: float
    upper_margin: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.lower_margin >= -self.tolerance and self.upper_margin >= -self.tolerance


def scheme_tolerance(field: GridField, problem: ProblemInstance) -> float:
    """Accuracy allowance derived from the recorded resolution metadata."""
    if field.metadata.get("scheme") == "sl":
        return 1e-9
    return 5.0 * (field.metadata["dx"] + field.metadata["dt"]) * (1.0 + problem.kappa)


def apriori_bounds_check(field: GridField, problem: ProblemInstance, tolerance: float | None = None) -> BoundsReport:
    """Verify (-|u0| + t mu) 1 <= u(t) <= exp(-tB) u0 + t M 1 at every node."""
    tol = scheme_tolerance(field, problem) if tolerance is None else tolerance
    datum = field.values[0]
    mu = problem.mu
    cost = problem.rest_cost
    bound = problem.datum_bound
    lower = np.inf
    upper = np.inf
    for k, t in enumerate(field.times):
        push = transition_matrix(problem.coupling, float(t)).entries
        pushed = np.einsum("ij,j...->i...", push, datum)
        lower = min(lower, float(np.min(field.values[k] - (-bound + t * mu))))
        upper = min(upper, float(np.min(pushed + t * cost - field.values[k])))
    report = BoundsReport(lower, upper, tol)
    if not report.passed:
        raise BoundViolated(
            f"a-priori bounds broken: lower margin {report.lower_margin:.3e}, "
            f"upper margin {report.upper_margin:.3e}, tolerance {tol:.3e}"
        )
    return report


def datum_from_slice(field: GridField, t: float):
    """Initial-datum callables that replay a solved slice; used for restarts."""
    sl = field.slice_at(t).copy()
    return tuple(_SliceDatum(field.box, sl[i].copy()) for i in range(field.m))


class _SliceDatum:
    def __init__(self, box: Box, values: np.ndarray):
        self.box = box
        self.values = values

    def __call__(self, points):
        return self.box.interpolate(self.values, np.asarray(points, dtype=float))
