import numpy as np
import pytest

from hjswitch import coupling, models, pde_solver
from hjswitch.errors import CFLViolated, OutOfDomain, VelocityRangeExceeded
from hjswitch.grids import Box, lattice_boundary_mask, velocity_lattice

from conftest import SYM2, CappedParabola, collapse_problem, reference_problem


def constant_problem(value=1.5, m=2, potentials=(0.0, 0.0)):
    members = tuple(
        models.QuadraticCosine(np.array([a]), np.array([1.0]), np.array([0.0])) for a in potentials
    )
    family = models.HamiltonianFamily(members)
    datum = tuple(_Constant(value) for _ in range(m))
    return pde_solver.build_problem(SYM2, family, datum, 1.0, 4.0)


class _Constant:
    def __init__(self, c):
        self.c = c

    def __call__(self, points):
        return np.full(np.asarray(points).shape[0], self.c)


class _Shifted:
    def __init__(self, base, bump):
        self.base = base
        self.bump = bump

    def __call__(self, points):
        x = np.asarray(points, dtype=float)[..., 0]
        return self.base(points) + self.bump * np.exp(-x * x)


class TestBoxInterpolation:
    def test_node_values_exact(self):
        box = Box(np.array([2.0]), 0.5)
        vals = np.sin(box.axis(0))
        for k, x in enumerate(box.axis(0)):
            assert box.interpolate(vals, np.array([x])) == pytest.approx(vals[k], abs=1e-15)

    def test_midpoint_of_linear_field_is_mean(self):
        box = Box(np.array([2.0]), 0.5)
        vals = 3.0 * box.axis(0) + 1.0
        got = box.interpolate(vals, np.array([0.25]))
        assert got == pytest.approx(0.5 * (vals[4] + vals[5]), abs=1e-14)

    def test_quadratic_interpolation_error_bound(self):
        dx = 0.1
        box = Box(np.array([2.0]), dx)
        vals = 0.5 * box.axis(0) ** 2
        x = 0.35  # half-cell offset
        err = abs(box.interpolate(vals, np.array([x])) - 0.5 * x * x)
        assert err <= dx * dx / 8.0 + 1e-12

    def test_shift_matches_pointwise_interpolation(self):
        rng = np.random.default_rng(0)
        box = Box(np.array([1.0]), 0.1)
        vals = rng.normal(size=box.shape)
        for offset in (-0.37, -0.1, 0.0, 0.033, 0.61):
            shifted = box.shift_linear(vals, np.array([offset]))
            pts = np.clip(box.axis(0) + offset, -1.0, 1.0)[:, None]
            np.testing.assert_allclose(shifted, box.interpolate(vals, pts), atol=1e-12)

    def test_shift_two_dimensional(self):
        rng = np.random.default_rng(1)
        box = Box(np.array([1.0, 1.0]), 0.25)
        vals = rng.normal(size=box.shape)
        offset = np.array([0.3, -0.55])
        shifted = box.shift_linear(vals, offset)
        mesh = box.node_mesh().reshape(-1, 2)
        pts = np.clip(mesh + offset, -1.0, 1.0)
        np.testing.assert_allclose(shifted.ravel(), box.interpolate(vals, pts), atol=1e-12)

    def test_lattice_contains_zero_and_is_symmetric(self):
        lat = velocity_lattice(3.3, 0.4, 1)
        assert np.any(np.all(lat == 0.0, axis=1))
        np.testing.assert_allclose(np.sort(lat[:, 0]), np.sort(-lat[:, 0]))
        assert lattice_boundary_mask(lat).sum() == 2


class TestConstantData:
    def test_fd_preserves_constants(self):
        problem = constant_problem()
        field = pde_solver.solve_fd(problem, pde_solver.Resolution(dx=0.1))
        np.testing.assert_allclose(field.values, 1.5, atol=1e-10)

    def test_sl_preserves_constants(self):
        problem = constant_problem()
        field = pde_solver.solve_semilagrangian(problem, pde_solver.Resolution(dx=0.1))
        np.testing.assert_allclose(field.values, 1.5, atol=1e-10)


class TestCollapseOracle:
    """Identical components with zero potentials follow the scalar Hopf-Lax
    closed form x^2 / (2 (1 + t)) wherever the datum cap stays inactive."""

    def exact(self, t, x):
        return x * x / (2.0 * (1.0 + t))

    @pytest.mark.parametrize("solver", [pde_solver.solve_fd, pde_solver.solve_semilagrangian])
    def test_closed_form(self, solver):
        dx = 0.05
        problem = collapse_problem()
        field = solver(problem, pde_solver.Resolution(dx=dx))
        xs = np.linspace(-3.0, 3.0, 41)
        worst = max(
            abs(pde_solver.evaluate(field, 1.0, x, i) - self.exact(1.0, x))
            for x in xs
            for i in (1, 2)
        )
        assert worst <= 3.0 * dx

    def test_schemes_agree_on_reference(self):
        problem = reference_problem()
        res = pde_solver.Resolution(dx=0.05)
        fd = pde_solver.solve_fd(problem, res)
        sl = pde_solver.solve_semilagrangian(problem, res)
        dt_coarse = max(fd.metadata["dt"], sl.metadata["dt"])
        guard = problem.half_width - sl.metadata["q_max"] * problem.horizon
        xs = np.linspace(-guard, guard, 31)
        worst = max(
            abs(pde_solver.evaluate(fd, t, x, i) - pde_solver.evaluate(sl, t, x, i))
            for t in (0.5, 1.0)
            for x in xs
            for i in (1, 2)
        )
        assert worst <= max(3.0 * res.dx, 3.0 * dt_coarse)


class TestTabulatedScheme:
    def test_fd_and_sl_agree_for_tilted_hamiltonian(self):
        # H = (p-1)^2/2 has an asymmetric Lagrangian L = q + q^2/2; agreement
        # between the H-driven and L-driven schemes pins the sign conventions.
        xg = np.linspace(-6.0, 6.0, 25)
        pg = np.linspace(-9.0, 9.0, 361)
        vals = np.broadcast_to(0.5 * (pg - 1.0) ** 2, (xg.size, pg.size)).copy()
        member = models.TabulatedHamiltonian(xg, pg, vals)
        family = models.HamiltonianFamily((member, member))
        datum = CappedParabola(cap=4.5)
        problem = pde_solver.build_problem(SYM2, family, (datum, datum), 0.5, 6.0)
        res = pde_solver.Resolution(dx=0.1)
        fd = pde_solver.solve_fd(problem, res)
        sl = pde_solver.solve_semilagrangian(problem, res)
        xs = np.linspace(-1.5, 1.5, 11)
        worst = max(
            abs(pde_solver.evaluate(fd, 0.5, x, 1) - pde_solver.evaluate(sl, 0.5, x, 1)) for x in xs
        )
        assert worst <= max(3.0 * res.dx, 3.0 * sl.metadata["dt"])


class TestMonotoneProperties:
    def test_raising_datum_never_lowers_output(self):
        base = reference_problem(horizon=0.4, half_width=6.0)
        bumped = pde_solver.build_problem(
            base.coupling,
            base.hamiltonians,
            (_Shifted(base.initial_datum[0], 0.7), base.initial_datum[1]),
            base.horizon,
            base.half_width,
        )
        # one shared operator: pin q_max and the step so schemes coincide
        res = pde_solver.Resolution(dx=0.1, dt_fd=0.008, dt_sl=0.1, q_max=6.0)
        for solver in (pde_solver.solve_fd, pde_solver.solve_semilagrangian):
            low = solver(base, res)
            high = solver(bumped, res)
            assert np.all(high.values >= low.values - 1e-12)

    def test_sl_nonexpansive_per_step_and_end_to_end(self):
        base = reference_problem(horizon=0.5, half_width=6.0)
        other = pde_solver.build_problem(
            base.coupling,
            base.hamiltonians,
            (_Shifted(base.initial_datum[0], 0.4), _Shifted(base.initial_datum[1], -0.6)),
            base.horizon,
            base.half_width,
        )
        res = pde_solver.Resolution(dx=0.1, dt_sl=0.1, q_max=6.0)
        a = pde_solver.solve_semilagrangian(base, res)
        b = pde_solver.solve_semilagrangian(other, res)
        gaps = np.max(np.abs(a.values - b.values), axis=(1, 2))
        assert np.all(np.diff(gaps) <= 1e-12)
        assert gaps[-1] <= gaps[0] + 1e-12

    def test_constant_shift_comparison(self):
        base = reference_problem(horizon=0.4, half_width=6.0)
        shifted = pde_solver.build_problem(
            base.coupling,
            base.hamiltonians,
            tuple(_PlusConstant(f, 1.0) for f in base.initial_datum),
            base.horizon,
            base.half_width,
        )
        res = pde_solver.Resolution(dx=0.1)
        low = pde_solver.solve_semilagrangian(base, res)
        high = pde_solver.solve_semilagrangian(shifted, res)
        gap = high.values - low.values
        assert np.all(gap >= -1e-12) and np.all(gap <= 1.0 + 1e-12)


class _PlusConstant:
    def __init__(self, base, c):
        self.base = base
        self.c = c

    def __call__(self, points):
        return self.base(points) + self.c


class TestEvaluate:
    def test_grid_node_returns_stored_value(self, reference_sl_field):
        field = reference_sl_field
        k, idx = 3, 40
        t = float(field.times[k])
        x = float(field.box.axis(0)[idx])
        assert pde_solver.evaluate(field, t, x, 1) == pytest.approx(field.values[k, 0, idx], abs=1e-12)

    def test_out_of_domain(self, reference_sl_field):
        with pytest.raises(OutOfDomain):
            pde_solver.evaluate(reference_sl_field, 0.5, 9.5, 1)
        with pytest.raises(OutOfDomain):
            pde_solver.evaluate(reference_sl_field, 2.5, 0.0, 1)


class TestAprioriBounds:
    def test_constants_zero_potentials_exact(self):
        problem = constant_problem()
        field = pde_solver.solve_semilagrangian(problem, pde_solver.Resolution(dx=0.1))
        report = pde_solver.apriori_bounds_check(field, problem)
        assert report.passed
        # both sides collapse onto the constant: zero slack up to rounding
        assert report.upper_margin == pytest.approx(0.0, abs=1e-9)

    def test_time_zero_bounds_trivial(self, reference, reference_sl_field):
        report = pde_solver.apriori_bounds_check(reference_sl_field, reference)
        assert report.passed

    def test_fd_bounds_within_scheme_tolerance(self, reference):
        field = pde_solver.solve_fd(reference, pde_solver.Resolution(dx=0.1))
        report = pde_solver.apriori_bounds_check(field, reference)
        assert report.passed


class TestResolutionGuards:
    def test_cfl_violation_raises(self, reference):
        bound = pde_solver.cfl_bound(reference, pde_solver.Resolution(dx=0.1))
        with pytest.raises(CFLViolated):
            pde_solver.solve_fd(reference, pde_solver.Resolution(dx=0.1, dt_fd=3.0 * bound))

    def test_velocity_range_guard(self):
        problem = collapse_problem()
        with pytest.raises(VelocityRangeExceeded):
            pde_solver.solve_semilagrangian(problem, pde_solver.Resolution(dx=0.1, q_max=1.0))


class TestSemigroupRestart:
    def test_restart_agrees_within_one_step_error(self, reference):
        res = pde_solver.Resolution(dx=0.1, dt_sl=0.06, q_max=5.5)
        full = pde_solver.solve_semilagrangian(reference, res)
        half = pde_solver.solve_semilagrangian(
            pde_solver.build_problem(
                reference.coupling, reference.hamiltonians, reference.initial_datum, 0.5, reference.half_width
            ),
            res,
        )
        restarted = pde_solver.solve_semilagrangian(
            pde_solver.build_problem(
                reference.coupling,
                reference.hamiltonians,
                pde_solver.datum_from_slice(half, 0.5),
                0.5,
                reference.half_width,
            ),
            res,
        )
        guard = reference.half_width - full.metadata["q_max"] - 0.5
        xs = np.linspace(-guard, guard, 21)
        gap = max(
            abs(pde_solver.evaluate(full, 1.0, x, i) - pde_solver.evaluate(restarted, 0.5, x, i))
            for x in xs
            for i in (1, 2)
        )
        tol = 3.0 * (res.dx + 0.06) * (1.0 + reference.kappa)
        assert gap <= tol


class TestBoundaryInvariance:
    def test_interior_unchanged_when_box_doubles(self):
        horizon = 0.2
        small = reference_problem(horizon=horizon, half_width=4.0)
        large = reference_problem(horizon=horizon, half_width=8.0)
        res = pde_solver.Resolution(dx=0.1)
        for solver in (pde_solver.solve_fd, pde_solver.solve_semilagrangian):
            a = solver(small, res)
            b = solver(large, res)
            xs = np.linspace(-1.0, 1.0, 11)
            gap = max(
                abs(pde_solver.evaluate(a, horizon, x, i) - pde_solver.evaluate(b, horizon, x, i))
                for x in xs
                for i in (1, 2)
            )
            assert gap <= 1e-9


class TestTwoDimensional:
    def test_sl_collapse_two_dims(self):
        zero = models.QuadraticCosine(np.array([0.0]), np.array([[1.0, 0.0]]), np.array([0.0]))
        family = models.HamiltonianFamily((zero, zero))
        datum = CappedParabola(cap=3.0)
        problem = pde_solver.build_problem(SYM2, family, (datum, datum), 0.5, 2.5)
        field = pde_solver.solve_semilagrangian(problem, pde_solver.Resolution(dx=0.25, dt_sl=0.25))
        for x in ((0.0, 0.0), (0.5, -0.5), (1.0, 0.5)):
            r2 = x[0] ** 2 + x[1] ** 2
            exact = r2 / (2.0 * 1.5)
            got = pde_solver.evaluate(field, 0.5, np.array(x), 1)
            assert abs(got - exact) <= 3.0 * 0.25

    def test_fd_constants_two_dims(self):
        zero = models.QuadraticCosine(np.array([0.0]), np.array([[1.0, 0.0]]), np.array([0.0]))
        family = models.HamiltonianFamily((zero, zero))
        datum = tuple(_Constant(0.7) for _ in range(2))
        problem = pde_solver.build_problem(SYM2, family, datum, 0.3, 2.0)
        field = pde_solver.solve_fd(problem, pde_solver.Resolution(dx=0.25))
        np.testing.assert_allclose(field.values, 0.7, atol=1e-10)


class TestCsvRoundTrip:
    def test_save_and_load(self, tmp_path, reference_sl_field):
        target = tmp_path / "field.csv"
        reference_sl_field.save_csv(str(target))
        loaded = pde_solver.load_field_csv(str(target))
        np.testing.assert_allclose(loaded.values, reference_sl_field.values, atol=0)
        np.testing.assert_allclose(loaded.times, reference_sl_field.times, atol=0)
        assert loaded.metadata["scheme"] == "sl"
        assert loaded.metadata["dx"] == reference_sl_field.metadata["dx"]
