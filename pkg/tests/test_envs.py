import csv

import numpy as np
import pytest

from apb.envs import (CONTROL_COST, DAMPING, DT, FAMILIES, MASS, TRAIN_SUPPORT, PointMassEnv, TaskDistribution,
                      TaskSpec, in_train_support, observe, ood_task, reward, rollout, rollout_batch,
                      sample_train_tasks, uniform_policy, zero_policy)


class TestTasks:
    def test_vel_line_samples(self):
        tasks = sample_train_tasks(TaskDistribution("vel-line"), 30, seed=0)
        params = np.array([t.parameter for t in tasks])
        assert len(tasks) == 30 and params.min() >= 0.0 and params.max() <= 3.0
        assert [t.parameter for t in sample_train_tasks(TaskDistribution("vel-line"), 30, seed=0)] == list(params)

    def test_goal_plane_upper_semicircle(self):
        for t in sample_train_tasks(TaskDistribution("goal-plane"), 50, seed=1):
            assert np.linalg.norm(t.goal) == pytest.approx(3.0)
            assert t.goal[1] >= 0

    def test_dyn_rand_scalings(self):
        for t in sample_train_tasks(TaskDistribution("dyn-rand"), 20, seed=2):
            assert -3.0 <= t.parameter <= 2.1
            assert t.mass == pytest.approx(MASS * 1.5 ** t.parameter)
            assert t.damping == pytest.approx(DAMPING * 1.3 ** t.parameter)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_train_tasks(TaskDistribution("vel-line"), 0, seed=0)

    def test_ood_parameters(self):
        assert ood_task("vel-line").parameter == -2.0
        np.testing.assert_allclose(ood_task("goal-plane").goal, [0.0, -3.0], atol=1e-12)
        assert ood_task("dyn-rand").parameter == 2.4
        np.testing.assert_allclose(ood_task("vel-to-dir").direction, [-1.0, 0.0])
        assert ood_task("dir-plane").parameter == pytest.approx(1.5 * np.pi)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_ood_outside_support(self, family):
        task = ood_task(family)
        assert task.is_ood and not in_train_support(family, task.parameter)

    def test_in_distribution_must_lie_in_support(self):
        with pytest.raises(ValueError):
            TaskSpec("vel-line", -1.0)
        assert TaskSpec("vel-line", -1.0, is_ood=True).parameter == -1.0

    def test_dict_round_trip(self):
        for family in FAMILIES:
            task = ood_task(family)
            assert TaskSpec.from_dict(task.to_dict()) == task

    def test_supports_declared(self):
        assert set(TRAIN_SUPPORT) == set(FAMILIES)


class TestReward:
    def test_vel_line_at_target(self):
        assert reward(TaskSpec("vel-line", 1.5), [4.0, -2.0, 1.5, 0.3], [0.0, 0.0]) == 0.0

    def test_goal_plane_at_goal(self):
        task = TaskSpec("goal-plane", 0.7)
        assert reward(task, [*task.goal, 0.0, 0.0], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-15)

    def test_dir_plane_orthogonal(self):
        assert reward(TaskSpec("dir-plane", np.pi / 2), [0, 0, 1.0, 0.0], [0, 0]) == pytest.approx(0.0, abs=1e-15)

    def test_forms_and_control_cost(self):
        a = np.array([0.5, -1.0])
        c = CONTROL_COST * 1.25
        assert reward(TaskSpec("vel-line", 2.0), [0, 0, 1.0, 0], a) == pytest.approx(-1.0 - c)
        assert reward(TaskSpec("dyn-rand", 0.0), [0, 0, 0.7, 3.0], a) == pytest.approx(0.7 - c)
        assert reward(ood_task("vel-to-dir"), [0, 0, -1.2, 0.5], a) == pytest.approx(1.2 - c)
        assert reward(TaskSpec("goal-plane", 0.0), [0, 0, 0, 0], a) == pytest.approx(-3.0 - c)

    def test_upper_bound(self):
        rng = np.random.default_rng(0)
        states = rng.normal(scale=3, size=(500, 4))
        actions = rng.uniform(-1, 1, size=(500, 2))
        for task in (TaskSpec("vel-line", 1.0), TaskSpec("goal-plane", 1.0)):
            assert reward(task, states, actions).max() <= 0.0


class TestDynamics:
    def test_zero_action_from_rest(self):
        env = PointMassEnv(TaskSpec("vel-line", 1.0), init_noise=0.0)
        traj = rollout(env, zero_policy, np.random.default_rng(0))
        assert not traj.states.any() and not traj.next_states.any()
        assert traj.ret == pytest.approx(-1.0 * env.horizon)

    def test_full_force_matches_recurrence(self):
        env = PointMassEnv(TaskSpec("dyn-rand", 1.0), init_noise=0.0)
        traj = rollout(env, lambda s: np.array([1.0, -1.0]), np.random.default_rng(0))
        p, v = np.zeros(2), np.zeros(2)
        m, d = MASS * 1.5, DAMPING * 1.3
        for t in range(env.horizon):
            v = (1 - d * DT) * v + (DT / m) * np.array([1.0, -1.0])
            p = p + DT * v
            np.testing.assert_allclose(traj.next_states[t], [*p, *v], atol=1e-12)

    def test_alpha_zero_is_nominal(self):
        nominal = PointMassEnv(TaskSpec("vel-line", 1.0))
        scaled = PointMassEnv(TaskSpec("dyn-rand", 0.0))
        s = np.array([0.1, 0.2, 0.3, -0.4])
        a = np.array([0.5, -0.2])
        np.testing.assert_array_equal(nominal.dynamics(s, a)[0], scaled.dynamics(s, a)[0])

    def test_actions_clipped(self):
        env = PointMassEnv(TaskSpec("vel-line", 1.0))
        _, a = env.dynamics(np.zeros(4), [3.0, -7.0])
        np.testing.assert_array_equal(a, [1.0, -1.0])

    def test_translation_invariance(self):
        env = PointMassEnv(TaskSpec("dir-plane", 0.4))
        s = np.array([0.0, 0.0, 0.5, 0.1])
        shifted = s + np.array([10.0, -4.0, 0, 0])
        a = np.array([0.2, 0.9])
        n1, r1, _ = env.step(s, a)
        n2, r2, _ = env.step(shifted, a)
        np.testing.assert_allclose(n1[2:], n2[2:])
        assert r1 == pytest.approx(r2)

    def test_blow_up_flags_episode(self):
        env = PointMassEnv(TaskSpec("dyn-rand", 0.0))
        env.mass = 1e-320  # force the velocity to overflow
        traj = rollout(env, lambda s: np.ones(2), np.random.default_rng(0))
        assert traj.diverged and len(traj) < env.horizon


class TestRollout:
    def test_deterministic_given_seed(self):
        env = PointMassEnv(TaskSpec("goal-plane", 1.0))
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            runs.append(rollout(env, uniform_policy(rng), rng))
        np.testing.assert_array_equal(runs[0].states, runs[1].states)

    def test_golden_return(self):
        env = PointMassEnv(TaskSpec("goal-plane", 1.0))
        rng = np.random.default_rng(11)
        assert rollout(env, uniform_policy(rng), rng).ret == pytest.approx(-443.5708987298164, rel=1e-12)

    def test_horizon_validated(self):
        with pytest.raises(ValueError):
            rollout(PointMassEnv(TaskSpec("vel-line", 1.0)), zero_policy, np.random.default_rng(0), horizon=0)

    def test_observation_masking(self):
        s = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(observe(TaskSpec("vel-line", 1.0), s), [0, 0, 3, 4])
        np.testing.assert_array_equal(observe(TaskSpec("goal-plane", 1.0), s), s)
        seen = []
        env = PointMassEnv(TaskSpec("vel-line", 1.0))
        traj = rollout(env, lambda o: seen.append(o) or np.array([1.0, 0.0]), np.random.default_rng(0))
        assert all(not o[:2].any() for o in seen)
        assert traj.states[5:, 0].any()  # the true state still moves

    def test_batch_matches_single(self):
        env = PointMassEnv(TaskSpec("vel-line", 2.0), init_noise=0.0)
        policy = lambda o: np.tanh(o[..., 2:] + 0.3)
        states, actions, rewards = rollout_batch(env, policy, np.random.default_rng(0), 3)
        single = rollout(env, policy, np.random.default_rng(0))
        for i in range(3):
            np.testing.assert_allclose(rewards[i], single.rewards, atol=1e-12)
            np.testing.assert_allclose(states[i], single.states, atol=1e-12)

    def test_csv_export(self, tmp_path):
        env = PointMassEnv(TaskSpec("vel-line", 1.0))
        traj = rollout(env, lambda o: np.array([0.3, 0.1]), np.random.default_rng(0), horizon=5)
        traj.to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["t", "p_x", "p_y", "v_x", "v_y", "a_x", "a_y", "r"]
        assert len(rows) == 6
        assert float(rows[3][7]) == traj.rewards[2]
