"""Coupling matrices, their stochastic semigroups, and vector pushes.

A coupling matrix B has nonpositive off-diagonal entries and zero row sums,
so -B generates a semigroup of stochastic matrices t -> exp(-t B).  This
module owns the matrix exponential (scaling-and-squaring on a truncated
Taylor series) and the two products the rest of the package needs:
``exp(-t B) v`` and ``B u``.

All types are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    NegativeTime,
    NumericsError,
    OffDiagonalPositive,
    RowSumNonzero,
)

ROW_SUM_TOL = 1e-9        # admissible drift of coupling row sums from zero
STOCHASTIC_ROW_TOL = 1e-10
CLAMP_LIMIT = 1e-8        # negative entries beyond this signal a bug
TAYLOR_ORDER = 12
SCALING_TARGET = 0.5      # squaring count chosen so ||tB / 2^s||_inf <= 0.5


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CouplingMatrix:
    """m x m matrix with b_ij <= 0 off the diagonal and exact zero row sums."""

    entries: np.ndarray

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def max_rate(self) -> float:
        """Largest diagonal entry; the fastest total jump rate of any state."""
        return float(np.max(np.diag(self.entries), initial=0.0))

    @property
    def max_abs_entry(self) -> float:
        return float(np.max(np.abs(self.entries), initial=0.0))

    def row_norm(self) -> float:
        """Max absolute row sum; equals 2 * max_i b_ii for a valid matrix."""
        return float(np.max(np.sum(np.abs(self.entries), axis=1), initial=0.0))


@dataclass(frozen=True)
class StochasticMatrix:
    """m x m matrix with nonnegative entries and unit row sums."""

    entries: np.ndarray

    @property
    def m(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ProbabilityVector:
    """Nonnegative vector summing to one."""

    weights: np.ndarray

    @property
    def m(self) -> int:
        return self.weights.shape[0]


def validate(raw) -> CouplingMatrix:
    """Check a raw square matrix and normalize it into a CouplingMatrix.

    Off-diagonal entries must be <= 0 and each row must sum to zero within
    ``ROW_SUM_TOL``.  The diagonal is recomputed as b_ii = -sum_{j!=i} b_ij
    so row sums are exactly zero afterwards.
    """
    b = np.asarray(raw, dtype=float)
    if b.ndim != 2 or b.shape[0] != b.shape[1] or b.shape[0] < 1:
        raise RowSumNonzero(f"coupling matrix must be square and nonempty, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise RowSumNonzero("coupling matrix has non-finite entries")
    off = b.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off > 0.0):
        i, j = np.argwhere(off > 0.0)[0]
        raise OffDiagonalPositive(f"entry ({i + 1},{j + 1}) = {b[i, j]} is positive off the diagonal")
    sums = b.sum(axis=1)
    if np.any(np.abs(sums) > ROW_SUM_TOL):
        i = int(np.argmax(np.abs(sums)))
        raise RowSumNonzero(f"row {i + 1} sums to {sums[i]:.3e}, beyond {ROW_SUM_TOL:.0e} of zero")
    normalized = off
    np.fill_diagonal(normalized, -off.sum(axis=1))
    return CouplingMatrix(_frozen(normalized))


def as_stochastic(raw: np.ndarray) -> StochasticMatrix:
    """Clamp rounding noise and renormalize rows into a StochasticMatrix."""
    p = np.array(raw, dtype=float)
    worst = float(p.min(initial=0.0))
    if worst < -CLAMP_LIMIT:
        raise NumericsError(f"stochastic matrix entry {worst:.3e} below clamp limit {-CLAMP_LIMIT:.0e}")
    np.clip(p, 0.0, None, out=p)
    sums = p.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NumericsError(f"stochastic row sums drifted to {sums.ravel()}")
    p /= sums
    return StochasticMatrix(_frozen(p))


def as_probability_vector(raw: np.ndarray) -> ProbabilityVector:
    w = np.array(raw, dtype=float)
    if w.min(initial=0.0) < -CLAMP_LIMIT:
        raise NumericsError(f"probability weight {w.min():.3e} below clamp limit")
    np.clip(w, 0.0, None, out=w)
    total = w.sum()
    if abs(total - 1.0) > 1e-6:
        raise NumericsError(f"probability weights sum to {total}")
    return ProbabilityVector(_frozen(w / total))


def raw_expm(a: np.ndarray) -> np.ndarray:
    """exp(a) by scaling-and-squaring of the order-12 Taylor series."""
    a = np.asarray(a, dtype=float)
    norm = float(np.max(np.sum(np.abs(a), axis=1), initial=0.0))
    squarings = 0
    if norm > SCALING_TARGET:
        squarings = int(np.ceil(np.log2(norm / SCALING_TARGET)))
        a = a / (2.0 ** squarings)
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, TAYLOR_ORDER + 1):
        term = term @ a / k
        result += term
    for _ in range(squarings):
        result = result @ result
    return result


def transition_matrix(coupling: CouplingMatrix, t: float) -> StochasticMatrix:
    """exp(-t B); rows sum to one and entries are clamped nonnegative."""
    if t < 0.0:
        raise NegativeTime(f"transition matrix requested at t = {t}")
    return as_stochastic(raw_expm(-t * coupling.entries))


def push_vector(coupling: CouplingMatrix, t: float, v) -> np.ndarray:
    """exp(-t B) v; the expected component value along the switching chain."""
    if t < 0.0:
        raise NegativeTime(f"push requested at t = {t}")
    return transition_matrix(coupling, t).entries @ np.asarray(v, dtype=float)


def apply_coupling(coupling: CouplingMatrix, u) -> np.ndarray:
    """B u, the zeroth-order coupling term of the system."""
    return coupling.entries @ np.asarray(u, dtype=float)
