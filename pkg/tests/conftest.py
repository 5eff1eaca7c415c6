"""Shared problem builders for the test suite.

The reference instance matches the one the acceptance criteria pin down:
one spatial dimension, two equations with H_i(x,p) = p^2/2 + a_i cos(x),
amplitudes (0.3, 0.5), symmetric unit-rate coupling, initial datum
(min(x^2, 4), min(|x|, 2)), horizon 1, box half-width 8.

The collapse instance has identical components and zero potentials with a
capped parabola datum, so both schemes must reproduce the scalar Hopf-Lax
closed form x^2 / (2 (1 + t)) away from the cap.
"""

import numpy as np
import pytest

from hjswitch import coupling, models, pde_solver


class CappedParabola:
    def __init__(self, cap=12.5):
        self.cap = cap

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        return np.minimum(0.5 * np.sum(pts * pts, axis=-1), self.cap)


class CappedSquare:
    def __call__(self, points):
        x = np.asarray(points, dtype=float)[..., 0]
        return np.minimum(x * x, 4.0)


class CappedAbs:
    def __call__(self, points):
        x = np.asarray(points, dtype=float)[..., 0]
        return np.minimum(np.abs(x), 2.0)


SYM2 = coupling.validate([[1.0, -1.0], [-1.0, 1.0]])


def reference_problem(horizon=1.0, half_width=8.0):
    family = models.HamiltonianFamily(
        (
            models.QuadraticCosine(np.array([0.3]), np.array([1.0]), np.array([0.0])),
            models.QuadraticCosine(np.array([0.5]), np.array([1.0]), np.array([0.0])),
        )
    )
    return pde_solver.build_problem(
        SYM2, family, (CappedSquare(), CappedAbs()), horizon, half_width, label="reference"
    )


def collapse_problem(horizon=1.0, half_width=6.0, cap=12.5):
    zero = models.QuadraticCosine(np.array([0.0]), np.array([1.0]), np.array([0.0]))
    family = models.HamiltonianFamily((zero, zero))
    datum = CappedParabola(cap)
    return pde_solver.build_problem(
        SYM2, family, (datum, datum), horizon, half_width, label="collapse"
    )


@pytest.fixture(scope="session")
def reference():
    return reference_problem()


@pytest.fixture(scope="session")
def collapse():
    return collapse_problem()


@pytest.fixture(scope="session")
def reference_sl_field(reference):
    return pde_solver.solve_semilagrangian(reference, pde_solver.Resolution(dx=0.05))
