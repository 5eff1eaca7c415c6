"""Hamiltonian and Lagrangian families with numeric and analytic transforms.

Two member kinds are supported.  The analytic kind is H(x, p) = |p|^2/2 + V(x)
with V a finite sum of cosines; its Lagrangian |q|^2/2 - V(x) and all
gradients are closed form, and it works in spatial dimension 1 or 2.  The
tabulated kind stores H on a rectangular (x, p) grid with bilinear
interpolation (dimension 1 only), takes Legendre transforms by a grid max
refined with three golden-section steps, and differentiates by centered
finite differences.

Members broadcast: positions and momenta are arrays whose last axis is the
spatial dimension, and any leading shapes compatible under numpy broadcasting
are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingMatrix
from .errors import (
    CoercivityViolated,
    ConvexityViolated,
    NotDifferentiableModel,
    VelocityOutOfRange,
)

CONVEXITY_TOL = 1e-9
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def as_point(x, dim: int) -> np.ndarray:
    """Normalize a scalar or length-dim sequence to a (dim,) float array."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (dim,):
        raise ValueError(f"expected a point of dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class QuadraticCosine:
    """H(x, p) = |p|^2 / 2 + sum_r a_r cos(<k_r, x> + phi_r)."""

    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        k = np.asarray(self.frequencies, dtype=float)
        if k.ndim == 1:
            k = k[:, None]
        phi = np.atleast_1d(np.asarray(self.phases, dtype=float))
        if not (a.shape[0] == k.shape[0] == phi.shape[0]):
            raise ValueError("amplitudes, frequencies, phases must have equal length")
        if k.shape[1] not in (1, 2):
            raise ValueError("spatial dimension must be 1 or 2")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "frequencies", k)
        object.__setattr__(self, "phases", phi)

    @property
    def dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def differentiable(self) -> bool:
        return True

    @property
    def potential_bound(self) -> float:
        return float(np.sum(np.abs(self.amplitudes)))

    @property
    def potential_gradient_bound(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) * np.linalg.norm(self.frequencies, axis=1)))

    def potential(self, x) -> np.ndarray:
        angles = np.asarray(x, dtype=float) @ self.frequencies.T + self.phases
        return np.cos(angles) @ self.amplitudes

    def potential_gradient(self, x) -> np.ndarray:
        angles = np.asarray(x, dtype=float) @ self.frequencies.T + self.phases
        return -(np.sin(angles) * self.amplitudes) @ self.frequencies

    def hamiltonian(self, x, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return 0.5 * np.sum(p * p, axis=-1) + self.potential(x)

    def lagrangian(self, x, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return 0.5 * np.sum(q * q, axis=-1) - self.potential(x)

    def hamiltonian_gradients(self, x, p):
        p = np.asarray(p, dtype=float)
        return self.potential_gradient(x), np.broadcast_arrays(p, np.asarray(x, float))[0]

    def lagrangian_q_gradient(self, x, q) -> np.ndarray:
        return np.broadcast_arrays(np.asarray(q, dtype=float), np.asarray(x, float))[0]

    def lagrangian_x_gradient(self, x, q) -> np.ndarray:
        return -self.potential_gradient(x)


def _interp_axis(grid: np.ndarray, pts: np.ndarray):
    """Cell index and fraction for linear interpolation with flat extension."""
    step = grid[1] - grid[0]
    rel = (pts - grid[0]) / step
    idx = np.clip(np.floor(rel).astype(int), 0, grid.size - 2)
    frac = np.clip(rel - idx, 0.0, 1.0)
    return idx, frac


@dataclass(frozen=True)
class TabulatedHamiltonian:
    """H sampled on a rectangular (x, p) grid; one spatial dimension.

    Bilinear interpolation between nodes, flat extension outside.  Discrete
    midpoint convexity along the p axis is required at construction.
    """

    x_grid: np.ndarray
    p_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        xg = np.asarray(self.x_grid, dtype=float)
        pg = np.asarray(self.p_grid, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (xg.size, pg.size):
            raise ValueError("values must have shape (len(x_grid), len(p_grid))")
        if xg.size < 3 or pg.size < 3:
            raise ValueError("grids need at least 3 nodes per axis")
        mid_gap = vals[:, 1:-1] - 0.5 * (vals[:, :-2] + vals[:, 2:])
        worst = float(mid_gap.max())
        if worst > CONVEXITY_TOL:
            raise ConvexityViolated(f"midpoint convexity in p violated by {worst:.2e}")
        object.__setattr__(self, "x_grid", xg)
        object.__setattr__(self, "p_grid", pg)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return 1

    @property
    def differentiable(self) -> bool:
        return False

    def hamiltonian(self, x, p) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., 0]
        p = np.asarray(p, dtype=float)[..., 0]
        x, p = np.broadcast_arrays(x, p)
        xi, xf = _interp_axis(self.x_grid, x)
        pi, pf = _interp_axis(self.p_grid, p)
        v = self.values
        return (
            v[xi, pi] * (1 - xf) * (1 - pf)
            + v[xi + 1, pi] * xf * (1 - pf)
            + v[xi, pi + 1] * (1 - xf) * pf
            + v[xi + 1, pi + 1] * xf * pf
        )

    def hamiltonian_gradients(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        hx = self.x_grid[1] - self.x_grid[0]
        hp = self.p_grid[1] - self.p_grid[0]
        if (
            np.any(x[..., 0] < self.x_grid[0] + hx) or np.any(x[..., 0] > self.x_grid[-1] - hx)
            or np.any(p[..., 0] < self.p_grid[0] + hp) or np.any(p[..., 0] > self.p_grid[-1] - hp)
        ):
            raise NotDifferentiableModel("finite differences undefined within one cell of the table edge")
        ex = np.zeros_like(x)
        ex[..., 0] = hx
        ep = np.zeros_like(p)
        ep[..., 0] = hp
        grad_x = (self.hamiltonian(x + ex, p) - self.hamiltonian(x - ex, p)) / (2 * hx)
        grad_p = (self.hamiltonian(x, p + ep) - self.hamiltonian(x, p - ep)) / (2 * hp)
        return grad_x[..., None], grad_p[..., None]


def legendre(member, x, q, q_max: float | None = None) -> float:
    """L(x, q) = sup_p { <p, q> - H(x, p) } for a single point (x, q)."""
    x = as_point(x, member.dim)
    q = as_point(q, member.dim)
    if q_max is not None and np.linalg.norm(q) > q_max:
        raise VelocityOutOfRange(f"|q| = {np.linalg.norm(q):.3g} exceeds the truncation {q_max}")
    if isinstance(member, QuadraticCosine):
        return float(member.lagrangian(x, q))
    return float(_tabulated_legendre(member, x[None, :], float(q[0]))[0])


def _tabulated_legendre(ham: TabulatedHamiltonian, x: np.ndarray, q: float) -> np.ndarray:
    """Grid max of p*q - H(x, p), refined by three golden-section steps.

    ``x`` is a batch of points with shape (M, 1); returns shape (M,).
    """
    pg = ham.p_grid
    h_vals = ham.hamiltonian(x[:, None, :], pg[None, :, None])
    scores = pg[None, :] * q - h_vals
    grid_best = np.max(scores, axis=1)
    best = np.argmax(scores, axis=1)
    a = pg[np.maximum(best - 1, 0)]
    b = pg[np.minimum(best + 1, pg.size - 1)]

    def score_at(p):
        return p * q - ham.hamiltonian(x, p[:, None])

    for _ in range(3):
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        take_left = score_at(c) >= score_at(d)
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
    return np.maximum(score_at(0.5 * (a + b)), grid_best)


@dataclass(frozen=True)
class TabulatedLagrangian:
    """Numeric Legendre transform of a tabulated Hamiltonian on an (x, q) grid."""

    x_grid: np.ndarray
    q_grid: np.ndarray
    values: np.ndarray

    @property
    def dim(self) -> int:
        return 1

    @property
    def differentiable(self) -> bool:
        return False

    def lagrangian(self, x, q) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., 0]
        q = np.asarray(q, dtype=float)[..., 0]
        x, q = np.broadcast_arrays(x, q)
        xi, xf = _interp_axis(self.x_grid, x)
        qi, qf = _interp_axis(self.q_grid, q)
        v = self.values
        return (
            v[xi, qi] * (1 - xf) * (1 - qf)
            + v[xi + 1, qi] * xf * (1 - qf)
            + v[xi, qi + 1] * (1 - xf) * qf
            + v[xi + 1, qi + 1] * xf * qf
        )

    def lagrangian_q_gradient(self, x, q) -> np.ndarray:
        raise NotDifferentiableModel("tabulated Lagrangians do not expose gradients")

    def lagrangian_x_gradient(self, x, q) -> np.ndarray:
        raise NotDifferentiableModel("tabulated Lagrangians do not expose gradients")

    @property
    def lower_bound(self) -> float:
        return float(self.values.min())

    @property
    def rest_value_sup(self) -> float:
        qi = int(np.argmin(np.abs(self.q_grid)))
        return float(self.values[:, qi].max())


@dataclass(frozen=True)
class HamiltonianFamily:
    """The m Hamiltonians of the system plus shared coercivity metadata."""

    members: tuple
    q_max: float | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("family needs at least one member")
        dims = {mem.dim for mem in self.members}
        if len(dims) != 1:
            raise ValueError("all members must share the spatial dimension")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def member(self, j: int):
        """1-based access, matching equation indices."""
        return self.members[j - 1]

    def potential_bound(self) -> float:
        """Upper bound on all |V_i|; tabulated members use |H(x,0)| samples."""
        bounds = []
        for mem in self.members:
            if isinstance(mem, QuadraticCosine):
                bounds.append(mem.potential_bound)
            else:
                zero = np.zeros((mem.x_grid.size, 1))
                xs = mem.x_grid[:, None]
                bounds.append(float(np.max(np.abs(mem.hamiltonian(xs, zero)))))
        return max(bounds)

    def x_gradient_bound(self) -> float:
        """max_i sup |d_x H_i|, for Lipschitz-constant estimates."""
        out = 0.0
        for mem in self.members:
            if isinstance(mem, QuadraticCosine):
                out = max(out, mem.potential_gradient_bound)
            else:
                dx = np.max(np.abs(np.diff(mem.values, axis=0)), initial=0.0) / (mem.x_grid[1] - mem.x_grid[0])
                out = max(out, float(dx))
        return out

    def velocity_bound(self, p_bound: float) -> float:
        """max_i sup { |d_p H_i(x,p)| : |p| <= p_bound }."""
        out = 0.0
        for mem in self.members:
            if isinstance(mem, QuadraticCosine):
                out = max(out, p_bound)
            else:
                keep = np.abs(mem.p_grid) <= p_bound + 1e-12
                cols = np.flatnonzero(keep)
                if cols.size >= 2:
                    vals = mem.values[:, cols]
                    dp = np.max(np.abs(np.diff(vals, axis=1))) / (mem.p_grid[1] - mem.p_grid[0])
                    out = max(out, float(dp))
        return out


@dataclass(frozen=True)
class LagrangianFamily:
    """Member Lagrangians mirroring a HamiltonianFamily."""

    members: tuple
    q_max: float | None = None

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def member(self, j: int):
        return self.members[j - 1]

    def lower_bound(self) -> float:
        """mu <= inf_i inf L_i; enters the lower a-priori solution bound."""
        vals = []
        for mem in self.members:
            if isinstance(mem, QuadraticCosine):
                vals.append(-mem.potential_bound)
            else:
                vals.append(mem.lower_bound)
        return min(vals)

    def rest_value_sup(self) -> float:
        """M >= sup_i sup_x L_i(x, 0); enters the upper a-priori bound."""
        vals = []
        for mem in self.members:
            if isinstance(mem, QuadraticCosine):
                vals.append(mem.potential_bound)
            else:
                vals.append(mem.rest_value_sup)
        return max(vals)

    def superlinear_floor(self, r) -> np.ndarray:
        """Theta(r) = r^2/2 + mu_floor, a lower envelope of every member."""
        return 0.5 * np.square(r) + min(0.0, self.lower_bound())


def build_lagrangians(family: HamiltonianFamily, q_max: float, q_nodes: int = 161) -> LagrangianFamily:
    """Derive the Lagrangian family; tabulated members get a numeric transform."""
    members = []
    for mem in family.members:
        if isinstance(mem, QuadraticCosine):
            members.append(mem)
        else:
            qg = np.linspace(-q_max, q_max, q_nodes)
            xs = mem.x_grid[:, None]
            vals = np.stack([_tabulated_legendre(mem, xs, float(q)) for q in qg], axis=1)
            members.append(TabulatedLagrangian(mem.x_grid.copy(), qg, vals))
    return LagrangianFamily(tuple(members), q_max=q_max)


def effective_lagrangian(
    lagrangians: LagrangianFamily,
    j: int,
    coupling: CouplingMatrix,
    u_field,
    t: float,
    x,
    q,
) -> float:
    """L_j(x, q) minus the coupling term (B u(t, .))_j at the interpolated field."""
    x_pt = as_point(x, lagrangians.dim)
    q_pt = as_point(q, lagrangians.dim)
    base = float(lagrangians.member(j).lagrangian(x_pt, q_pt))
    u_vec = u_field.vector_at(t, x_pt)
    return base - float(coupling.entries[j - 1] @ u_vec)


def hamiltonian_gradients(member, x, p):
    """(d_x H, d_p H) at one point; finite differences for tabulated members."""
    x_pt = as_point(x, member.dim)
    p_pt = as_point(p, member.dim)
    gx, gp = member.hamiltonian_gradients(x_pt, p_pt)
    return np.asarray(gx, dtype=float).reshape(member.dim), np.asarray(gp, dtype=float).reshape(member.dim)


@dataclass(frozen=True)
class CoercivityReport:
    """Witnessed envelope check: per radius, shell min/max vs alpha/beta."""

    radii: np.ndarray
    shell_min: np.ndarray
    shell_max: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def worst_slack(self) -> float:
        return float(min((self.shell_min - self.alpha).min(), (self.beta - self.shell_max).min()))


def coercivity_report(
    family: HamiltonianFamily,
    radii=None,
    x_half_width: float = 6.0,
    x_count: int = 41,
    potential_bound: float | None = None,
) -> CoercivityReport:
    """Sample H over momentum shells and verify alpha(r) <= H <= beta(r).

    The envelopes are r^2/2 -/+ a potential bound: the declared
    ``potential_bound`` when given, else a bound derived from the members
    themselves (tabulated members fold their measured deviation from r^2/2
    into it).
    """
    if radii is None:
        top = family.q_max if family.q_max is not None else 4.0
        for mem in family.members:
            if isinstance(mem, TabulatedHamiltonian):
                top = min(top, float(min(-mem.p_grid[0], mem.p_grid[-1])))
        radii = np.linspace(0.0, top, 9)
    radii = np.asarray(radii, dtype=float)
    if potential_bound is not None:
        v_bound = float(potential_bound)
    else:
        v_bound = family.potential_bound()
        for mem in family.members:
            if isinstance(mem, TabulatedHamiltonian):
                dev = mem.values - 0.5 * mem.p_grid[None, :] ** 2
                v_bound = max(v_bound, float(np.max(np.abs(dev))))
    alpha = 0.5 * radii**2 - v_bound
    beta = 0.5 * radii**2 + v_bound

    if family.dim == 1:
        directions = np.array([[-1.0], [1.0]])
    else:
        angles = np.linspace(0.0, 2 * np.pi, 17)[:-1]
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    axes = [np.linspace(-x_half_width, x_half_width, x_count)] * family.dim
    xs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, family.dim)

    shell_min = np.empty_like(radii)
    shell_max = np.empty_like(radii)
    for k, r in enumerate(radii):
        vals = []
        for direction in directions:
            p = np.broadcast_to(r * direction, xs.shape)
            vals.append(np.asarray([_member_h(mem, xs, p) for mem in family.members]))
        stacked = np.concatenate([v.ravel() for v in vals])
        shell_min[k] = stacked.min()
        shell_max[k] = stacked.max()
        if shell_min[k] < alpha[k] - 1e-9 or shell_max[k] > beta[k] + 1e-9:
            raise CoercivityViolated(
                f"shell r = {r:.3g}: values in [{shell_min[k]:.4g}, {shell_max[k]:.4g}] "
                f"escape [{alpha[k]:.4g}, {beta[k]:.4g}]"
            )
    return CoercivityReport(radii, shell_min, shell_max, alpha, beta)


def _member_h(member, x, p):
    if isinstance(member, TabulatedHamiltonian):
        inside = (x[:, 0] >= member.x_grid[0]) & (x[:, 0] <= member.x_grid[-1])
        return member.hamiltonian(x[inside], p[inside]) if inside.any() else np.zeros(0)
    return member.hamiltonian(x, p)
