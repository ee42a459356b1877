import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeadapt.arm_env import (
    ArmState,
    DomainInstance,
    DomainProfile,
    EnvConfig,
    EnvError,
    default_targets,
    env_reset,
    env_step,
    forward_kinematics,
    observe,
    reward_and_cost,
    sample_randomization,
)

CFG = EnvConfig()


def make_instance(noise=0.0, stiffness=0.0, damping=1000.0, target=None, tid=0):
    if target is None:
        target = np.array([0.0, 0.0, CFG.l1 + CFG.l2])
    return DomainInstance(
        noise_pct=noise, stiffness=stiffness, damping=damping,
        target_id=tid, target_pos=np.asarray(target, dtype=np.float64),
    )


class TestForwardKinematics:
    def test_upright(self):
        ee = forward_kinematics(0.0, 0.0, CFG)
        assert np.allclose(ee, [0.0, 0.0, CFG.l1 + CFG.l2], atol=1e-15)

    def test_elbow_horizontal(self):
        ee = forward_kinematics(0.0, math.pi / 2, CFG)
        assert np.allclose(ee, [CFG.l2, 0.0, CFG.l1], atol=1e-12)

    def test_yawed_elbow_horizontal(self):
        ee = forward_kinematics(math.pi / 2, math.pi / 2, CFG)
        assert np.allclose(ee, [0.0, CFG.l2, CFG.l1], atol=1e-12)

    @given(q1=st.floats(-3.0, 3.0), q2=st.floats(-3.0, 3.0))
    @settings(max_examples=200, deadline=None)
    def test_reach_bounded(self, q1, q2):
        assert np.linalg.norm(forward_kinematics(q1, q2, CFG)) <= CFG.l1 + CFG.l2 + 1e-12


class TestReset:
    def test_upright_at_rest(self):
        s = env_reset(make_instance(), CFG)
        assert (s.q1, s.q2, s.q1dot, s.q2dot, s.t) == (0.0, 0.0, 0.0, 0.0, 0)

    def test_reset_repeatable(self):
        inst = make_instance()
        a, b = env_reset(inst, CFG), env_reset(inst, CFG)
        assert (a.q1, a.q2, a.t) == (b.q1, b.q2, b.t)
        assert np.array_equal(a.target, b.target)

    def test_target_from_instance(self):
        inst = make_instance(target=[0.1, 0.2, 0.3])
        assert np.array_equal(env_reset(inst, CFG).target, [0.1, 0.2, 0.3])


class TestRewardAndCost:
    def test_at_target_no_violation(self):
        assert reward_and_cost(0.0, False, 10, 100) == (0.0, 0.0)

    def test_violation_formula(self):
        r, c = reward_and_cost(0.5, True, 40, 100)
        assert (r, c) == (0.0, 30.0)
        r, c = reward_and_cost(0.3, True, 90, 100)
        assert (r, c) == (0.0, pytest.approx(3.0))

    def test_safe_step_formula(self):
        assert reward_and_cost(1.0, False, 5, 100) == (-1.0, 0.0)
        assert reward_and_cost(0.5, False, 5, 100) == (-0.5, 0.0)

    def test_oracle_1000_random_tuples(self, rng):
        for _ in range(1000):
            d = float(rng.uniform(0, 2))
            t = int(rng.integers(0, 101))
            violated = bool(rng.integers(0, 2))
            r, c = reward_and_cost(d, violated, t, 100)
            if violated:
                assert r == 0.0 and c == d * (100 - t)
            else:
                assert r == -d and c == 0.0

    def test_preconditions(self):
        with pytest.raises(EnvError):
            reward_and_cost(-0.1, False, 0, 100)
        with pytest.raises(EnvError):
            reward_and_cost(0.1, False, 101, 100)


class TestEnvStep:
    def test_commanded_speed_is_capped(self):
        # Full command with a crisp servo tracks the 20 deg/s cap closely.
        inst = make_instance(stiffness=0.0, damping=1000.0)
        s = env_reset(inst, CFG)
        s2, *_ = env_step(s, np.array([1.0, 1.0]), inst, CFG)
        assert s2.q1dot == pytest.approx(CFG.v_max, rel=1e-3)
        assert s2.q2dot == pytest.approx(CFG.v_max, rel=1e-3)
        # Oversized commands are clipped to the same cap.
        s3, *_ = env_step(s, np.array([5.0, 5.0]), inst, CFG)
        assert s3.q1dot == pytest.approx(s2.q1dot)

    def test_steady_state_tracking_ratio(self):
        # v* = damping/(damping+stiffness) * u for the servo law.
        inst = make_instance(stiffness=10.0, damping=20.0)
        s = env_reset(inst, CFG)
        for _ in range(30):
            s, _, _, done, _ = env_step(s, np.array([1.0, 0.0]), inst, CFG)
            if done:
                break
        assert s.q1dot == pytest.approx((20.0 / 30.0) * CFG.v_max, rel=1e-3)

    def test_violation_terminates_with_cost(self):
        inst = make_instance(stiffness=0.0, damping=1000.0)
        s = env_reset(inst, CFG)
        done = violated = False
        while not done:
            s, r, c, done, violated = env_step(s, np.array([0.0, 1.0]), inst, CFG)
        assert violated
        assert abs(s.q2) > CFG.limit2
        assert r == 0.0 and c > 0.0

    def test_cost_value_matches_formula(self):
        inst = make_instance(stiffness=0.0, damping=1000.0)
        s = env_reset(inst, CFG)
        while True:
            prev_t = s.t
            s, r, c, done, violated = env_step(s, np.array([0.0, 1.0]), inst, CFG)
            if done:
                break
        ee = forward_kinematics(s.q1, s.q2, CFG)
        d = float(np.linalg.norm(s.target - ee))
        assert violated
        assert c == pytest.approx(d * (CFG.episode_len - prev_t))

    def test_episode_runs_to_horizon_without_violation(self):
        inst = make_instance()
        s = env_reset(inst, CFG)
        steps = 0
        done = False
        while not done:
            s, r, c, done, violated = env_step(s, np.array([0.0, 0.0]), inst, CFG)
            steps += 1
            assert c == 0.0 and r <= 0.0
        assert steps == CFG.episode_len and s.t == CFG.episode_len
        assert not violated

    def test_step_terminal_raises(self):
        inst = make_instance()
        s = ArmState(q1=0, q2=0, q1dot=0, q2dot=0, t=CFG.episode_len,
                     target=inst.target_pos)
        with pytest.raises(EnvError):
            env_step(s, np.array([0.0, 0.0]), inst, CFG)

    def test_cost_only_on_violating_terminal_step(self, rng):
        # Property: per step, either r < 0 and c == 0, or (violation) r == 0
        # and c >= 0; cost can be nonzero only on the final step.
        inst = make_instance(stiffness=5.0, damping=800.0)
        s = env_reset(inst, CFG)
        costs = []
        done = False
        while not done:
            a = rng.uniform(-1, 1, 2)
            a[1] = 1.0  # drive joint 2 toward its limit
            s, r, c, done, violated = env_step(s, a, inst, CFG)
            costs.append(c)
            assert r <= 0.0 and c >= 0.0
            if c > 0:
                assert violated and r == 0.0
        assert all(c == 0.0 for c in costs[:-1])

    def test_speed_bounded_by_cap_when_drag_free(self, rng):
        # Servo tracking bound: without drag the joint speed never exceeds the
        # commanded cap regardless of gain.
        for gain in (10.0, 100.0, 1000.0):
            inst = make_instance(stiffness=0.0, damping=gain)
            s = env_reset(inst, CFG)
            done = False
            while not done:
                s, *_rest, done, _v = (lambda t: (t[0], t[1], t[2], t[3], t[4]))(
                    env_step(s, rng.uniform(-1, 1, 2), inst, CFG)
                )
                assert abs(s.q1dot) <= CFG.v_max + 1e-12
                assert abs(s.q2dot) <= CFG.v_max + 1e-12

    def test_trajectory_bit_reproducible(self):
        inst = make_instance(stiffness=123.0, damping=456.0)
        actions = np.random.default_rng(0).uniform(-1, 1, (50, 2))

        def run():
            s = env_reset(inst, CFG)
            out = []
            for a in actions:
                s, r, c, done, v = env_step(s, a, inst, CFG)
                out.append((s.q1, s.q2, s.q1dot, s.q2dot, r, c))
                if done:
                    break
            return out

        assert run() == run()


class TestObserve:
    def test_zero_noise_exact(self):
        inst = make_instance(noise=0.0, target=[0.1, 0.2, 0.9])
        s = env_reset(inst, CFG)
        obs = observe(s, inst, CFG, np.random.default_rng(0))
        ee = forward_kinematics(0.0, 0.0, CFG)
        assert np.array_equal(obs, [0.1 - ee[0], 0.2 - ee[1], 0.9 - ee[2], 0.0, 0.0])

    def test_noise_bounds(self):
        inst = make_instance(noise=0.2, target=[1.0 + CFG.l1 + CFG.l2, 0.0, 0.0])
        s = ArmState(q1=1.0, q2=1.0, q1dot=0, q2dot=0, t=0, target=inst.target_pos)
        rng = np.random.default_rng(8)
        base = observe(s, inst, CFG, None)
        for _ in range(200):
            noisy = observe(s, inst, CFG, rng)
            assert np.all(np.abs(noisy - base) <= 0.2 * np.abs(base) + 1e-12)

    def test_reproducible_with_fixed_rng(self):
        inst = make_instance(noise=0.2)
        s = env_reset(inst, CFG)
        a = observe(s, inst, CFG, np.random.default_rng(3))
        b = observe(s, inst, CFG, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_observation_has_five_finite_components(self):
        inst = make_instance(noise=0.2)
        s = env_reset(inst, CFG)
        obs = observe(s, inst, CFG, np.random.default_rng(1))
        assert obs.shape == (5,) and np.all(np.isfinite(obs))


class TestSampleRandomization:
    def test_degenerate_ranges(self):
        profile = DomainProfile("realistic", (0.0, 0.02), (10.0, 10.0), (20.0, 20.0))
        targets = default_targets(CFG)
        rng = np.random.default_rng(0)
        for _ in range(50):
            inst = sample_randomization(profile, targets, 1, rng)
            assert inst.stiffness == 10.0 and inst.damping == 20.0
            assert inst.target_id == 1

    def test_pretraining_ranges(self):
        profile = DomainProfile("randomized", (0.0, 0.2), (10.0, 1000.0), (10.0, 1000.0))
        targets = default_targets(CFG)
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            inst = sample_randomization(profile, targets, 0, rng)
            assert 10.0 <= inst.stiffness <= 1000.0
            assert 10.0 <= inst.damping <= 1000.0
            assert 0.0 <= inst.noise_pct <= 0.2

    def test_empty_target_set(self):
        profile = DomainProfile("x", (0, 0), (1, 1), (1, 1))
        with pytest.raises(EnvError):
            sample_randomization(profile, [], 0, np.random.default_rng(0))

    def test_invalid_profile_ranges(self):
        with pytest.raises(EnvError):
            DomainProfile("bad", (0.2, 0.1), (1, 1), (1, 1))


class TestDefaultTargets:
    def test_four_reachable_targets(self):
        targets = default_targets(CFG)
        assert len(targets) == 4
        for t in targets:
            assert np.linalg.norm(t) <= CFG.l1 + CFG.l2

    def test_one_target_near_joint2_limit(self):
        # Target 1 requires q2 = 75 deg, within 5 deg of the 80 deg limit.
        t = default_targets(CFG)[1]
        expected = forward_kinematics(math.radians(-20), math.radians(75), CFG)
        assert np.allclose(t, expected, atol=1e-12)
