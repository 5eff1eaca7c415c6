import numpy as np
import pytest

from hjswitch import coupling, markov, models, path_optimizer, pde_solver, random_minimizer
from hjswitch.errors import EmptyEnsemble

from conftest import SYM2, CappedParabola, collapse_problem, reference_problem

RES = pde_solver.Resolution(dx=0.05, dt_dp=0.1)


@pytest.fixture(scope="module")
def solved_reference():
    problem = reference_problem()
    field = pde_solver.solve_semilagrangian(problem, RES)
    return problem, field


@pytest.fixture(scope="module")
def solved_collapse():
    problem = collapse_problem()
    field = pde_solver.solve_semilagrangian(problem, RES)
    return problem, field


def no_jump_path(i=1, horizon=1.0, m=2):
    return markov.IndexPath(i, np.array([]), np.array([], dtype=int), horizon, m)


def two_jump_path(times, states, i=1, horizon=1.0, m=2):
    return markov.IndexPath(i, np.asarray(times, dtype=float), np.asarray(states, dtype=int), horizon, m)


class TestConstructMinimizer:
    def test_zero_jump_path_collapses_to_single_segment(self, solved_reference):
        problem, field = solved_reference
        path = no_jump_path(i=1)
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.5, RES)
        assert len(sample.segments) == 1
        seg = path_optimizer.SegmentProblem(problem, 1, 0.0, np.array([0.5]), field=field)
        table = path_optimizer.solve_segment_dp(seg, RES)
        direct = path_optimizer.extract_minimizer(seg, table)
        np.testing.assert_array_equal(sample.curve.positions, direct.positions)
        np.testing.assert_array_equal(sample.curve.velocities, direct.velocities)

    def test_jump_times_are_sample_times_and_curve_is_continuous(self, solved_reference):
        problem, field = solved_reference
        path = two_jump_path([0.237, 0.711], [2, 1])
        sample = random_minimizer.construct_minimizer(field, problem, path, -0.3, RES)
        for tau in path.jump_times:
            assert np.any(np.isclose(sample.curve.times, tau, atol=0.0))
        # segment bookkeeping: piece k starts where piece k-1 stopped
        for record in sample.segments[1:]:
            k = int(np.flatnonzero(np.isclose(sample.curve.times, record.start_time))[0])
            np.testing.assert_array_equal(sample.curve.positions[k], record.start_point)

    def test_segment_indices_follow_the_path(self, solved_reference):
        problem, field = solved_reference
        path = two_jump_path([0.4], [2])
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.0, RES)
        assert [r.frozen_index for r in sample.segments] == [1, 2]
        assert sample.terminal_state == 2

    def test_symmetric_collapse_makes_jumps_invisible(self, solved_collapse):
        problem, field = solved_collapse
        x = 1.1
        plain = random_minimizer.construct_minimizer(field, problem, no_jump_path(), x, RES)
        jumpy = random_minimizer.construct_minimizer(
            field, problem, two_jump_path([0.3, 0.62], [2, 1]), x, RES
        )
        t_grid = np.linspace(0.0, 1.0, 21)
        gap = max(
            abs(plain.curve.position_at(t)[0] - jumpy.curve.position_at(t)[0]) for t in t_grid
        )
        assert gap <= 3.0 * RES.dx
        assert abs(plain.action - jumpy.action) <= 3.0 * RES.dx

    def test_nonanticipation_bit_exact(self, solved_reference):
        problem, field = solved_reference
        cut = 0.55
        before = [0.21, 0.43]
        original = two_jump_path(before + [0.8], [2, 1, 2])
        resampled = two_jump_path(before + [0.62, 0.91], [2, 1, 2, 1])
        a = random_minimizer.construct_minimizer(field, problem, original, 0.4, RES)
        b = random_minimizer.construct_minimizer(field, problem, resampled, 0.4, RES)
        keep_a = a.curve.times <= cut + 1e-12
        keep_b = b.curve.times <= cut + 1e-12
        np.testing.assert_array_equal(a.curve.times[keep_a], b.curve.times[keep_b])
        np.testing.assert_array_equal(a.curve.positions[keep_a], b.curve.positions[keep_b])


class TestExpectedAction:
    def test_zero_generator_is_deterministic(self):
        b0 = coupling.validate(np.zeros((2, 2)))
        member = models.QuadraticCosine(np.array([0.3]), np.array([1.0]), np.array([0.0]))
        family = models.HamiltonianFamily((member, member))
        datum = CappedParabola(cap=10.0)
        problem = pde_solver.build_problem(b0, family, (datum, datum), 1.0, 6.0)
        field = pde_solver.solve_semilagrangian(problem, RES)
        ensemble = markov.sample_ensemble(b0, 1, 1.0, 16, master_seed=5)
        est = random_minimizer.expected_action(field, problem, ensemble, 0.5, 1, RES)
        assert est.std_error == 0.0
        sample = random_minimizer.construct_minimizer(field, problem, ensemble.paths[0], 0.5, RES)
        assert est.mean == pytest.approx(sample.action, abs=1e-12)

    def test_butterfly_identity_small_ensemble(self, solved_reference):
        problem, field = solved_reference
        ensemble = markov.sample_ensemble(problem.coupling, 1, 1.0, 400, master_seed=99)
        x = 0.5
        est = random_minimizer.expected_action(field, problem, ensemble, x, 1, RES)
        pde_value = pde_solver.evaluate(field, 1.0, x, 1)
        tol = 3.0 * est.std_error + 5.0 * (RES.dx + 0.1)
        assert abs(est.mean - pde_value) <= tol

    def test_parallel_workers_reproduce_serial(self, solved_reference):
        problem, field = solved_reference
        ensemble = markov.sample_ensemble(problem.coupling, 2, 1.0, 96, master_seed=7)
        serial = random_minimizer.expected_action(field, problem, ensemble, -0.4, 2, RES, workers=1)
        parallel = random_minimizer.expected_action(field, problem, ensemble, -0.4, 2, RES, workers=2)
        assert serial.mean == pytest.approx(parallel.mean, abs=1e-12)
        assert serial.std_error == pytest.approx(parallel.std_error, abs=1e-12)

    def test_mismatched_initial_state_rejected(self, solved_reference):
        problem, field = solved_reference
        ensemble = markov.sample_ensemble(problem.coupling, 1, 1.0, 8, master_seed=3)
        with pytest.raises(ValueError):
            random_minimizer.expected_action(field, problem, ensemble, 0.0, 2, RES)
        with pytest.raises(EmptyEnsemble):
            random_minimizer.expected_action(
                field, problem, markov.PathEnsemble((), 1, 1.0, 2), 0.0, 1, RES
            )

    def test_constant_curves_are_suboptimal(self, solved_reference):
        # resting at x costs the pushed datum plus the expected rest cost,
        # which must dominate the optimal value
        problem, field = solved_reference
        x = np.array([0.5])
        ensemble = markov.sample_ensemble(problem.coupling, 1, 1.0, 400, master_seed=31)
        actions = []
        for path in ensemble.paths:
            total = float(problem.initial_datum[markov.state_at(path, 1.0) - 1](x[None, :])[0])
            cuts = [0.0] + [float(t) for t in path.jump_times] + [1.0]
            for a, b in zip(cuts[:-1], cuts[1:]):
                if b > a:
                    member = problem.lagrangians.member(markov.state_at(path, a))
                    total += (b - a) * float(member.lagrangian(x, np.zeros(1)))
            actions.append(total)
        mean = float(np.mean(actions))
        stderr = float(np.std(actions, ddof=1) / np.sqrt(len(actions)))
        # closed-form cross-check of the terminal part via the vector push
        datum_at_x = np.array([float(f(x[None, :])[0]) for f in problem.initial_datum])
        pushed = float(coupling.push_vector(problem.coupling, 1.0, datum_at_x)[0])
        rest = np.array(
            [float(problem.lagrangians.member(j).lagrangian(x, np.zeros(1))) for j in (1, 2)]
        )
        exact_rest = sum(
            0.05 * float(coupling.push_vector(problem.coupling, s, rest)[0])
            for s in np.arange(0.025, 1.0, 0.05)
        )
        assert abs(mean - (pushed + exact_rest)) <= 3.0 * stderr + 0.01
        assert mean + 3.0 * stderr >= pde_solver.evaluate(field, 1.0, float(x[0]), 1) - 5.0 * (RES.dx + 0.1)


class TestRelaxationBound:
    def test_zero_generator_matches_frozen_dp_exactly(self):
        b0 = coupling.validate(np.zeros((2, 2)))
        member = models.QuadraticCosine(np.array([0.2]), np.array([1.0]), np.array([0.0]))
        family = models.HamiltonianFamily((member, member))
        datum = CappedParabola(cap=10.0)
        problem = pde_solver.build_problem(b0, family, (datum, datum), 1.0, 6.0)
        path = no_jump_path(i=1)
        got = random_minimizer.relaxed_path_value(problem, path, 0.7, RES)
        seg = path_optimizer.SegmentProblem(problem, 1, 0.0, np.array([0.7]))
        table = path_optimizer.solve_segment_dp(seg, RES)
        want = float(table.box.interpolate(table.values[0], np.array([0.7])))
        assert got == pytest.approx(want, abs=1e-12)

    def test_collapsed_problem_matches_pde_value(self, solved_collapse):
        problem, field = solved_collapse
        ensemble = markov.sample_ensemble(problem.coupling, 1, 1.0, 60, master_seed=11)
        est = random_minimizer.relaxation_lower_bound(problem, ensemble, 0.8, 1, RES)
        pde_value = pde_solver.evaluate(field, 1.0, 0.8, 1)
        assert abs(est.mean - pde_value) <= 3.0 * est.std_error + 5.0 * (RES.dx + 0.1)

    def test_lower_bounds_the_solution(self, solved_reference):
        problem, field = solved_reference
        ensemble = markov.sample_ensemble(problem.coupling, 2, 1.0, 120, master_seed=13)
        x = -0.6
        est = random_minimizer.relaxation_lower_bound(problem, ensemble, x, 2, RES)
        pde_value = pde_solver.evaluate(field, 1.0, x, 2)
        assert est.mean <= pde_value + 3.0 * est.std_error + 5.0 * (RES.dx + 0.1)


class TestAdjointCurve:
    def test_quadratic_family_gives_minus_velocity(self, solved_reference):
        problem, field = solved_reference
        path = two_jump_path([0.42], [2])
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.3, RES)
        adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
        n = sample.curve.times.size
        for k in range(n - 1):
            np.testing.assert_allclose(adj.values[k], -sample.curve.velocities[k], atol=1e-14)
        np.testing.assert_allclose(adj.values[-1], -sample.curve.velocities[-1], atol=1e-14)

    def test_zero_potential_straight_line_momentum_constant(self):
        problem = collapse_problem()
        field = pde_solver.solve_semilagrangian(problem, RES)
        sample = random_minimizer.construct_minimizer(field, problem, no_jump_path(), 1.0, RES)
        adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
        inner = adj.values[1:-1]
        assert np.max(np.abs(inner - inner[0])) <= RES.dx / RES.dt_dp + 1e-12

    def test_adjoint_increments_shrink_under_refinement(self, solved_reference):
        problem, _ = solved_reference
        path = no_jump_path(i=2)
        increments = []
        for res in (pde_solver.Resolution(dx=0.05, dt_dp=0.2), pde_solver.Resolution(dx=0.0125, dt_dp=0.1)):
            field = pde_solver.solve_semilagrangian(problem, res)
            sample = random_minimizer.construct_minimizer(field, problem, path, 0.8, res)
            adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
            inner = adj.values[1:-1]
            increments.append(float(np.max(np.abs(np.diff(inner, axis=0))), ))
        assert increments[1] <= 0.51 * increments[0] + 1e-12


class TestDynamicsResidual:
    def test_velocity_identity_exact_for_quadratic(self, solved_reference):
        problem, field = solved_reference
        path = two_jump_path([0.37], [2])
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.2, RES)
        adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
        report = random_minimizer.dynamics_residual(sample, adj, field, problem)
        assert report.velocity_residual_max <= 1e-12

    def test_zero_coupling_zero_potential_momentum_conserved(self):
        b0 = coupling.validate(np.zeros((2, 2)))
        zero = models.QuadraticCosine(np.array([0.0]), np.array([1.0]), np.array([0.0]))
        family = models.HamiltonianFamily((zero, zero))
        datum = CappedParabola(cap=10.0)
        problem = pde_solver.build_problem(b0, family, (datum, datum), 1.0, 6.0)
        field = pde_solver.solve_semilagrangian(problem, RES)
        sample = random_minimizer.construct_minimizer(field, problem, no_jump_path(), 0.9, RES)
        adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
        report = random_minimizer.dynamics_residual(sample, adj, field, problem)
        assert report.momentum_residual_median <= 1e-9

    def test_reference_median_within_resolution_bound(self, solved_reference):
        problem, field = solved_reference
        rng = np.random.default_rng(2)
        medians = []
        for n in range(6):
            path = markov.sample_path(problem.coupling, 1, 1.0, markov.path_rng(17, n))
            sample = random_minimizer.construct_minimizer(field, problem, path, float(rng.uniform(-1, 1)), RES)
            adj = random_minimizer.adjoint_curve(sample, problem.lagrangians)
            report = random_minimizer.dynamics_residual(sample, adj, field, problem)
            if report.smooth_points:
                medians.append(report.momentum_residual_median)
        assert medians and float(np.median(medians)) <= 10.0 * (RES.dx + 0.1)


class TestPerIntervalCalibration:
    def test_single_segment_delegates_to_curve_calibration(self, solved_reference):
        problem, field = solved_reference
        path = no_jump_path(i=1)
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.5, RES)
        got = random_minimizer.per_interval_calibration(sample, field, problem)
        seg = path_optimizer.SegmentProblem(problem, 1, 0.0, np.array([0.5]), field=field)
        want = path_optimizer.calibration_residual(sample.curve, field, seg)
        assert got == pytest.approx(want, abs=1e-12)

    def test_residual_within_tolerance_across_sampled_paths(self, solved_reference):
        problem, field = solved_reference
        worst = 0.0
        for n in range(10):
            path = markov.sample_path(problem.coupling, 1, 1.0, markov.path_rng(23, n))
            sample = random_minimizer.construct_minimizer(field, problem, path, 0.25, RES)
            worst = max(worst, random_minimizer.per_interval_calibration(sample, field, problem))
        assert worst <= 5.0 * (RES.dx + 0.1) * (1.0 + problem.kappa)

    def test_perturbed_curve_residual_larger(self, solved_reference):
        problem, field = solved_reference
        path = two_jump_path([0.5], [2])
        sample = random_minimizer.construct_minimizer(field, problem, path, 0.5, RES)
        base = random_minimizer.per_interval_calibration(sample, field, problem)
        shift = 0.4 * np.sin(np.pi * sample.curve.times)
        wobble_curve = path_optimizer.MinimizingCurve(
            sample.curve.times,
            sample.curve.positions + shift[:, None],
            sample.curve.velocities
            + np.diff(shift)[:, None] / np.diff(sample.curve.times)[:, None],
            sample.curve.increments,
            sample.curve.terminal_cost,
            sample.curve.dp_value,
            sample.curve.q_max + 2.0,
        )
        wobble = random_minimizer.RandomCurveSample(
            sample.path, wobble_curve, sample.segments, sample.action, sample.terminal_state
        )
        assert random_minimizer.per_interval_calibration(wobble, field, problem) > base + 0.05
