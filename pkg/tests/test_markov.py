import numpy as np
import pytest

from hjswitch import coupling, markov
from hjswitch.errors import EmptyEnsemble, OutOfHorizon

SYM2 = coupling.validate([[1.0, -1.0], [-1.0, 1.0]])


def three_sigma(p: float, n: int) -> float:
    return 3.0 * np.sqrt(max(p * (1.0 - p), 1e-12) / n)


@pytest.fixture(scope="module")
def big_ensemble():
    return markov.sample_ensemble(SYM2, 1, 1.0, 100_000, master_seed=20240901)


class TestSamplePath:
    def test_zero_generator_never_jumps(self):
        b = coupling.validate(np.zeros((3, 3)))
        p = markov.sample_path(b, 2, 5.0, markov.path_rng(1, 0))
        assert p.jump_count == 0
        for t in (0.0, 2.5, 5.0):
            assert markov.state_at(p, t) == 2

    def test_reproducible_bit_exact(self):
        a = markov.sample_ensemble(SYM2, 1, 1.0, 50, master_seed=42)
        b = markov.sample_ensemble(SYM2, 1, 1.0, 50, master_seed=42)
        for pa, pb in zip(a.paths, b.paths):
            np.testing.assert_array_equal(pa.jump_times, pb.jump_times)
            np.testing.assert_array_equal(pa.jump_states, pb.jump_states)

    def test_jump_count_poisson_mean(self, big_ensemble):
        # unit total rate in both states makes the jump process Poisson(T)
        counts = np.array([p.jump_count for p in big_ensemble.paths])
        assert abs(counts.mean() - 1.0) <= 3.0 * counts.std() / np.sqrt(len(counts))

    def test_state_law_matches_transition_matrix(self, big_ensemble):
        for t in (0.25, 0.5, 1.0):
            law = markov.empirical_state_law(big_ensemble, t)
            predicted = markov.predicted_state_law(SYM2, 1, t)
            for k in range(2):
                assert abs(law[k] - predicted[k]) <= three_sigma(predicted[k], len(big_ensemble))

    def test_invariants_over_many_random_generators(self):
        # structural invariants of sampled paths across 10_000 random generators
        rng = np.random.default_rng(77)
        for trial in range(10_000):
            m = int(rng.integers(1, 5))
            off = rng.uniform(0.0, 3.0, size=(m, m))
            np.fill_diagonal(off, 0.0)
            b = coupling.validate(np.diag(off.sum(axis=1)) - off)
            p = markov.sample_path(b, int(rng.integers(1, m + 1)), 0.5, markov.path_rng(5, trial))
            assert p.m == m
            if p.jump_count:
                assert np.all(np.diff(p.jump_times) > 0)
                seq = np.concatenate(([p.initial_state], p.jump_states))
                assert np.all(seq[1:] != seq[:-1])
                assert p.jump_states.min() >= 1 and p.jump_states.max() <= m
                assert 0.0 < p.jump_times[0] and p.jump_times[-1] <= p.horizon


class TestStateAt:
    def test_right_continuity_at_jump(self):
        p = markov.IndexPath(1, np.array([0.5]), np.array([2]), 1.0, 2)
        assert markov.state_at(p, 0.5) == 2
        assert markov.state_at(p, 0.499999) == 1

    def test_between_jumps(self):
        p = markov.IndexPath(1, np.array([0.2, 0.7]), np.array([2, 1]), 1.0, 2)
        assert markov.state_at(p, 0.0) == 1
        assert markov.state_at(p, 0.5) == 2
        assert markov.state_at(p, 0.9) == 1

    def test_out_of_horizon(self):
        p = markov.IndexPath(1, np.array([]), np.array([]), 1.0, 2)
        with pytest.raises(OutOfHorizon):
            markov.state_at(p, 1.5)


class TestShift:
    def test_zero_shift_identity(self):
        p = markov.IndexPath(1, np.array([0.3]), np.array([2]), 1.0, 2)
        q = markov.shift(p, 0.0)
        assert q.initial_state == p.initial_state and q.horizon == p.horizon
        np.testing.assert_array_equal(q.jump_times, p.jump_times)

    def test_shift_past_last_jump_is_constant(self):
        p = markov.IndexPath(1, np.array([0.3]), np.array([2]), 1.0, 2)
        q = markov.shift(p, 0.6)
        assert q.jump_count == 0 and q.initial_state == 2
        assert q.horizon == pytest.approx(0.4)

    def test_jump_exactly_at_shift_time_becomes_initial(self):
        p = markov.IndexPath(1, np.array([0.5]), np.array([2]), 1.0, 2)
        q = markov.shift(p, 0.5)
        assert q.initial_state == 2 and q.jump_count == 0

    def test_shifted_initial_law_matches_push_forward(self, big_ensemble):
        h = 0.3
        shifted = [markov.shift(p, h) for p in big_ensemble.paths]
        counts = np.zeros(2)
        for q in shifted:
            counts[q.initial_state - 1] += 1
        law = counts / len(shifted)
        predicted = markov.predicted_state_law(SYM2, 1, h)
        for k in range(2):
            assert abs(law[k] - predicted[k]) <= three_sigma(predicted[k], len(shifted))


class TestMismatchProbability:
    def test_equal_times_zero(self, big_ensemble):
        assert markov.mismatch_probability(big_ensemble, 0.4, 0.4) == 0.0

    def test_zero_generator_zero(self):
        b = coupling.validate(np.zeros((2, 2)))
        ens = markov.sample_ensemble(b, 1, 1.0, 100, master_seed=1)
        assert markov.mismatch_probability(ens, 0.1, 0.9) == 0.0

    def test_lipschitz_bound(self, big_ensemble):
        bound_rate = SYM2.m**2 * SYM2.max_abs_entry
        rng = np.random.default_rng(0)
        for _ in range(6):
            t1, t2 = sorted(rng.uniform(0.0, 1.0, size=2))
            freq = markov.mismatch_probability(big_ensemble, float(t1), float(t2))
            bound = bound_rate * (t2 - t1)
            assert freq <= bound + three_sigma(min(bound, 1.0), len(big_ensemble))

    def test_empty_ensemble(self):
        ens = markov.PathEnsemble((), 1, 1.0, 2)
        with pytest.raises(EmptyEnsemble):
            markov.mismatch_probability(ens, 0.1, 0.2)


class TestCylinderFrequency:
    def test_single_time_frequencies_sum_to_one(self, big_ensemble):
        total = sum(markov.cylinder_frequency(big_ensemble, [0.5], [k]) for k in (1, 2))
        assert total == pytest.approx(1.0)

    def test_time_zero_conditioned(self, big_ensemble):
        assert markov.cylinder_frequency(big_ensemble, [0.0], [1]) == 1.0

    def test_markov_factorization_two_times(self, big_ensemble):
        s, t = 0.3, 0.8
        p_matrix_s = coupling.transition_matrix(SYM2, s).entries
        p_matrix_st = coupling.transition_matrix(SYM2, t - s).entries
        for k in (1, 2):
            for j in (1, 2):
                freq = markov.cylinder_frequency(big_ensemble, [s, t], [k, j])
                predicted = p_matrix_s[0, k - 1] * p_matrix_st[k - 1, j - 1]
                assert abs(freq - predicted) <= three_sigma(predicted, len(big_ensemble))

    def test_chapman_kolmogorov_empirical(self, big_ensemble):
        s, t = 0.25, 0.75
        p_matrix = coupling.transition_matrix(SYM2, t - s).entries
        for j in (1, 2):
            lhs = markov.cylinder_frequency(big_ensemble, [t], [j])
            rhs = sum(
                markov.cylinder_frequency(big_ensemble, [s], [k]) * p_matrix[k - 1, j - 1]
                for k in (1, 2)
            )
            assert abs(lhs - rhs) <= three_sigma(lhs, len(big_ensemble))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ens = markov.sample_ensemble(SYM2, 2, 1.5, 40, master_seed=9)
        target = tmp_path / "paths.txt"
        markov.save_ensemble(ens, str(target))
        loaded = markov.load_ensemble(str(target))
        assert loaded.master_seed == 9 and loaded.m == 2
        assert loaded.initial_state == 2 and loaded.horizon == 1.5
        for a, b in zip(ens.paths, loaded.paths):
            np.testing.assert_array_equal(a.jump_times, b.jump_times)
            np.testing.assert_array_equal(a.jump_states, b.jump_states)
