import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apb.errors import DegenerateInputError, StructuralError
from apb.tabular import (PolicyMatrix, TabularMDP, bellman_optimality_residual, brute_force_optimal,
                         decompose_policy, deterministic_policy, format_scenario, greedy_actions, parse_scenario,
                         policy_matrix, random_mdp, random_policy_table, read_scenario, solve_optimal_policy,
                         state_values, write_scenario)
from apb.transfer import GridworldTask


def one_state(r, gamma, n_actions=1):
    return TabularMDP(1, n_actions, np.ones((n_actions, 1)), np.atleast_1d(r), gamma)


def value_iteration(mdp, pi, tol=1e-13):
    """Independent policy evaluation by fixed-point iteration."""
    v = np.zeros(mdp.n_states)
    while True:
        new = pi.data @ (mdp.reward + mdp.discount * mdp.transition @ v)
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new


class TestTabularMDP:
    def test_row_sum_violation_names_the_row(self):
        P = np.array([[1.0, 0.0], [0.5, 0.5], [0.9, 0.0], [0.0, 1.0]])
        with pytest.raises(StructuralError, match=r"row 2 \(state 1, action 0\)"):
            TabularMDP(2, 2, P, np.zeros(4), 0.9)

    def test_negative_entries_rejected(self):
        with pytest.raises(StructuralError, match="negative"):
            TabularMDP(1, 1, [[1.5], ], [0.0], 0.9) if False else TabularMDP(2, 1, [[1.5, -0.5], [0, 1]], [0, 0], 0.9)

    def test_shapes_and_discount_checked(self):
        with pytest.raises(StructuralError):
            TabularMDP(2, 2, np.ones((3, 2)) / 2, np.zeros(4), 0.9)
        with pytest.raises(StructuralError):
            TabularMDP(1, 1, [[1.0]], [0.0, 1.0], 0.9)
        with pytest.raises(StructuralError):
            TabularMDP(1, 1, [[1.0]], [0.0], 1.0)

    def test_reward_range_enforced(self):
        with pytest.raises(StructuralError, match="outside declared range"):
            TabularMDP(1, 1, [[1.0]], [2.0], 0.9, r_min=-1.0, r_max=1.0)

    def test_arrays_are_read_only(self):
        mdp = one_state(1.0, 0.5)
        with pytest.raises(ValueError):
            mdp.transition[0, 0] = 0.0


class TestPolicyMatrix:
    def test_deterministic_block_structure(self):
        mdp = random_mdp(np.random.default_rng(0), 2, 2)
        pi = policy_matrix(mdp, [[1, 0], [0, 1]])
        np.testing.assert_array_equal(pi.data, [[1, 0, 0, 0], [0, 0, 0, 1]])

    def test_uniform_policy(self):
        mdp = random_mdp(np.random.default_rng(0), 2, 2)
        pi = policy_matrix(mdp, np.full((2, 2), 0.5))
        np.testing.assert_array_equal(pi.data, [[.5, .5, 0, 0], [0, 0, .5, .5]])

    def test_one_hot_state_picks_out_extended_row(self):
        mdp = random_mdp(np.random.default_rng(0), 2, 2)
        pi = policy_matrix(mdp, [[0.3, 0.7], [0.6, 0.4]])
        np.testing.assert_array_equal(np.array([1.0, 0.0]) @ pi.data, [0.3, 0.7, 0, 0])

    def test_induced_chain_and_reward(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(rng, 3, 2)
        table = random_policy_table(rng, 3, 2)
        pi = policy_matrix(mdp, table)
        P = mdp.transition.reshape(3, 2, 3)
        r = mdp.reward.reshape(3, 2)
        np.testing.assert_allclose(pi.induced_transition(mdp), np.einsum("sa,sat->st", table, P), atol=1e-15)
        np.testing.assert_allclose(pi.induced_reward(mdp), (table * r).sum(1), atol=1e-15)

    def test_table_round_trip_is_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            S, A = rng.integers(1, 6), rng.integers(1, 5)
            mdp = random_mdp(rng, S, A)
            table = random_policy_table(rng, S, A)
            np.testing.assert_array_equal(policy_matrix(mdp, table).table(), table)

    def test_dimension_mismatch(self):
        mdp = random_mdp(np.random.default_rng(0), 2, 2)
        with pytest.raises(StructuralError):
            policy_matrix(mdp, np.full((3, 2), 0.5))
        with pytest.raises(StructuralError):
            policy_matrix(mdp, [[0.5, 0.6], [0.5, 0.5]])

    def test_mass_outside_block_rejected(self):
        with pytest.raises(StructuralError, match="outside its state block"):
            PolicyMatrix(np.array([[0.5, 0.5, 0.0, 0.0], [0.1, 0.0, 0.9, 0.0]]), 2)


class TestStateValues:
    def test_geometric_series(self):
        np.testing.assert_allclose(state_values(one_state(1.0, 0.5), policy_matrix(one_state(1.0, 0.5), [[1.0]])),
                                   [2.0], rtol=0, atol=1e-15)

    def test_zero_reward(self):
        mdp = one_state(0.0, 0.77)
        assert state_values(mdp, policy_matrix(mdp, [[1.0]]))[0] == 0.0

    def test_matches_iterative_evaluation(self):
        rng = np.random.default_rng(11)
        mdp = random_mdp(rng, 5, 3)
        pi = policy_matrix(mdp, random_policy_table(rng, 5, 3))
        np.testing.assert_allclose(state_values(mdp, pi), value_iteration(mdp, pi), atol=1e-11)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), S=st.integers(1, 6), A=st.integers(1, 4),
           gamma=st.floats(0.05, 0.99))
    def test_fixed_point_identity(self, seed, S, A, gamma):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, S, A, gamma)
        pi = policy_matrix(mdp, random_policy_table(rng, S, A))
        v = state_values(mdp, pi)
        assert np.max(np.abs(v - pi.data @ mdp.pivot(v))) <= 1e-10


class TestDecomposition:
    def test_one_dimensional_case(self):
        mdp = one_state(1.0, 0.5)
        dec = decompose_policy(mdp, policy_matrix(mdp, [[1.0]]))
        np.testing.assert_allclose(dec.pivot, [2.0])
        np.testing.assert_allclose(dec.rank_one, [[1.0]])
        np.testing.assert_allclose(dec.null_part, [[0.0]], atol=1e-15)

    def test_seeded_uniform_policy(self):
        rng = np.random.default_rng(5)
        mdp = random_mdp(rng, 4, 2)
        pi = policy_matrix(mdp, np.full((4, 2), 0.5))
        dec = decompose_policy(mdp, pi)
        # null part is defined as the difference, so reconstruction is exact up to one rounding
        assert np.max(np.abs(pi.data - dec.reconstruct())) <= 1e-15
        assert np.max(np.abs(dec.null_part @ dec.pivot)) <= 1e-10

    def test_rank_one_term_maps_pivot_to_values(self):
        rng = np.random.default_rng(6)
        mdp = random_mdp(rng, 5, 3)
        pi = policy_matrix(mdp, random_policy_table(rng, 5, 3))
        v = state_values(mdp, pi)
        dec = decompose_policy(mdp, pi, v)
        np.testing.assert_allclose(dec.rank_one @ dec.pivot, v, atol=1e-12)
        assert np.linalg.matrix_rank(dec.rank_one) == 1

    def test_zero_pivot_is_degenerate(self):
        mdp = one_state(0.0, 0.9)
        with pytest.raises(DegenerateInputError):
            decompose_policy(mdp, policy_matrix(mdp, [[1.0]]))

    def test_hundred_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            S, A = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            mdp = random_mdp(rng, S, A, float(rng.uniform(0.3, 0.99)))
            pi = policy_matrix(mdp, random_policy_table(rng, S, A))
            dec = decompose_policy(mdp, pi)
            assert np.max(np.abs(dec.reconstruct() - pi.data)) <= 1e-9
            assert np.max(np.abs(dec.null_part @ dec.pivot)) <= 1e-9


class TestOptimalPolicy:
    def test_dominant_action(self):
        mdp = one_state([0.0, 1.0], 0.9, n_actions=2)
        pi, v = solve_optimal_policy(mdp)
        np.testing.assert_array_equal(pi.greedy_actions(), [1])
        np.testing.assert_allclose(v, [10.0], atol=1e-10)

    def test_gridworld_shortest_path_values(self):
        grid = GridworldTask(3, 3, (0, 0))
        mdp = grid.to_mdp()
        pi, v = solve_optimal_policy(mdp)
        for s in range(9):
            r, c = grid.cell(s)
            d = r + c  # Manhattan distance to the corner goal
            expected = -sum(0.9 ** k for k in range(d))
            assert v[s] == pytest.approx(expected, abs=1e-10)
        # following the greedy actions decreases the distance every step
        for s in range(9):
            if s != grid.goal_index:
                nxt = grid.next_state(s, pi.greedy_actions()[s])
                assert sum(grid.cell(nxt)) == sum(grid.cell(s)) - 1

    def test_two_state_deterministic_chain_matches_brute_force(self):
        # action 0 stays, action 1 switches state
        P = np.array([[1, 0], [0, 1], [0, 1], [1, 0]], dtype=float)
        mdp = TabularMDP(2, 2, P, [0.0, 0.2, 1.0, -0.5], 0.8)
        pi, v = solve_optimal_policy(mdp)
        actions, v_bf = brute_force_optimal(mdp)
        np.testing.assert_array_equal(pi.greedy_actions(), actions)
        np.testing.assert_allclose(v, v_bf, atol=1e-10)

    def test_brute_force_equivalence_small_mdps(self):
        rng = np.random.default_rng(9)
        for _ in range(40):
            S, A = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            mdp = random_mdp(rng, S, A, float(rng.uniform(0.3, 0.95)))
            pi, v = solve_optimal_policy(mdp)
            _, v_bf = brute_force_optimal(mdp)
            np.testing.assert_allclose(v, v_bf, atol=1e-9)
            assert bellman_optimality_residual(mdp, v) <= 1e-10

    def test_ties_break_to_lowest_index(self):
        np.testing.assert_array_equal(greedy_actions([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]), [0, 1])
        np.testing.assert_array_equal(greedy_actions([[1.0, 1.0 + 1e-13]], tie_tol=1e-12), [0])

    def test_tolerance_must_be_positive(self):
        with pytest.raises(ValueError):
            solve_optimal_policy(one_state(1.0, 0.5), tol=0.0)


class TestScenarioFiles:
    def test_round_trip_is_bit_stable(self, tmp_path):
        rng = np.random.default_rng(1)
        mdp = random_mdp(rng, 3, 2)
        path = tmp_path / "m.txt"
        write_scenario(mdp, path)
        back = read_scenario(path)
        np.testing.assert_array_equal(back.transition, mdp.transition)
        np.testing.assert_array_equal(back.reward, mdp.reward)
        assert back.discount == mdp.discount

    def test_twelve_digit_decimals_survive(self):
        text = "1 2 0.9\n1\n1\n0.123456789012 -3.14159265358\n"
        mdp = parse_scenario(text)
        assert parse_scenario(format_scenario(mdp)).reward.tolist() == [0.123456789012, -3.14159265358]

    def test_comments_and_blank_lines(self):
        mdp = parse_scenario("# tiny\n1 1 0.5   # header\n\n1.0\n1.0\n")
        assert state_values(mdp, deterministic_policy(mdp, [0]))[0] == pytest.approx(2.0)

    def test_corrupted_row_is_named(self):
        text = "2 1 0.9\n1.0 0.0\n0.9 0.0\n0 0\n"
        with pytest.raises(StructuralError, match=r"row 1 \(state 1, action 0\) sums to 0.9"):
            parse_scenario(text)

    def test_wrong_line_count(self):
        with pytest.raises(StructuralError, match="expected 2 transition rows"):
            parse_scenario("2 1 0.9\n1 0\n0 0\n")
