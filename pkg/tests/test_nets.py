import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeadapt.nets import (
    LOG_2PI,
    GaussianPolicy,
    MlpSpec,
    MseObjective,
    NetsError,
    ParamVector,
    PolicyLogProbObjective,
    flatten,
    gaussian_logprob,
    gaussian_sample,
    grad_scalar,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
    policy_init,
    policy_layout,
)

from conftest import finite_diff_grad, max_rel_error


def random_spec(rng, max_width=6):
    n_hidden = int(rng.integers(1, 3))
    dims = rng.integers(1, max_width + 1, size=n_hidden + 2)
    return MlpSpec(int(dims[0]), tuple(int(d) for d in dims[1:-1]), int(dims[-1]))


class TestParamVector:
    def test_length_invariant(self):
        spec = MlpSpec(2, (3,), 1)
        with pytest.raises(NetsError):
            ParamVector(values=np.zeros(5), layout=spec.layout())

    def test_flatten_unflatten_roundtrip_bit_exact(self, rng):
        spec = random_spec(rng)
        p = mlp_init(spec, 7)
        q = flatten(p.unflatten(), spec.layout())
        assert q.values.tobytes() == p.values.tobytes()

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, seed):
        spec = MlpSpec(3, (4,), 2)
        p = mlp_init(spec, seed)
        assert flatten(p.unflatten(), spec.layout()).values.tobytes() == p.values.tobytes()

    def test_block_views_share_memory(self):
        spec = MlpSpec(2, (3,), 1)
        p = mlp_init(spec, 0)
        assert np.shares_memory(p.block("w0"), p.values)


class TestMlpInit:
    def test_param_count_paper_net(self):
        spec = MlpSpec(5, (64, 64), 2)
        assert spec.param_count() == 4674
        assert mlp_init(spec, 0).size == 4674

    def test_deterministic_given_seed(self):
        spec = MlpSpec(5, (64, 64), 2)
        a = mlp_init(spec, 3)
        b = mlp_init(spec, 3)
        assert a.values.tobytes() == b.values.tobytes()

    def test_seed_sensitivity(self):
        spec = MlpSpec(5, (64, 64), 2)
        assert not np.array_equal(mlp_init(spec, 0).values, mlp_init(spec, 1).values)

    def test_biases_zero_weights_bounded(self):
        spec = MlpSpec(4, (8,), 3)
        p = mlp_init(spec, 11)
        assert np.all(p.block("b0") == 0.0)
        assert np.all(p.block("b1") == 0.0)
        assert np.all(np.abs(p.block("w0")) <= 1.0 / math.sqrt(4))
        assert np.all(np.abs(p.block("w1")) <= 1.0 / math.sqrt(8))

    def test_bad_dims_rejected(self):
        with pytest.raises(NetsError):
            MlpSpec(0, (4,), 1)


class TestMlpForward:
    def test_zero_params_zero_output(self, rng):
        spec = MlpSpec(3, (4, 4), 2)
        p = ParamVector(values=np.zeros(spec.param_count()), layout=spec.layout())
        x = rng.standard_normal(3)
        assert np.all(mlp_forward(p, spec, x) == 0.0)

    def test_identity_like_net_at_zero(self):
        # 1 -> 1 -> 1 with unit weights, zero bias: tanh(0) = 0 -> output 0
        spec = MlpSpec(1, (1,), 1)
        p = flatten(
            {"w0": np.array([[1.0]]), "b0": np.zeros((1, 1)),
             "w1": np.array([[1.0]]), "b1": np.zeros((1, 1))},
            spec.layout(),
        )
        assert mlp_forward(p, spec, np.array([0.0]))[0] == 0.0

    def test_against_handrolled_forward(self, rng):
        spec = MlpSpec(4, (5, 3), 2)
        p = mlp_init(spec, 21)
        x = rng.standard_normal(4)
        h = np.tanh(x @ p.block("w0") + p.block("b0")[0])
        h = np.tanh(h @ p.block("w1") + p.block("b1")[0])
        expected = h @ p.block("w2") + p.block("b2")[0]
        assert np.allclose(mlp_forward(p, spec, x), expected, atol=1e-12, rtol=0)

    def test_batch_matches_single(self, rng):
        spec = MlpSpec(3, (6,), 2)
        p = mlp_init(spec, 5)
        xs = rng.standard_normal((7, 3))
        batched = mlp_forward(p, spec, xs)
        for i in range(7):
            assert np.allclose(batched[i], mlp_forward(p, spec, xs[i]), atol=1e-14)

    def test_dim_mismatch_raises(self):
        spec = MlpSpec(3, (4,), 1)
        p = mlp_init(spec, 0)
        with pytest.raises(NetsError):
            mlp_forward(p, spec, np.zeros(4))


class TestGradScalar:
    def test_constant_objective_zero_gradient(self):
        spec = MlpSpec(2, (3,), 1)
        p = mlp_init(spec, 1)

        class Const:
            def value(self, params):
                return 4.0

            def gradient(self, params):
                return params.with_values(np.zeros(params.size))

        assert np.all(grad_scalar(Const(), p).values == 0.0)

    def test_sum_of_squares_gradient(self):
        spec = MlpSpec(2, (3,), 1)
        p = mlp_init(spec, 2)

        class SumSq:
            def value(self, params):
                return float((params.values**2).sum())

            def gradient(self, params):
                return params.with_values(2.0 * params.values)

        assert np.allclose(grad_scalar(SumSq(), p).values, 2.0 * p.values, atol=1e-15)

    def test_nonfinite_gradient_names_layer(self):
        spec = MlpSpec(2, (3,), 1)
        p = mlp_init(spec, 3)

        class Bad:
            def value(self, params):
                return 0.0

            def gradient(self, params):
                values = np.zeros(params.size)
                values[-1] = np.nan  # lands in the final bias block
                return params.with_values(values)

        with pytest.raises(NetsError, match="b1"):
            grad_scalar(Bad(), p)

    def test_mse_gradient_matches_finite_differences(self, rng):
        spec = MlpSpec(3, (4,), 2)
        p = mlp_init(spec, 9)
        obj = MseObjective(
            spec=spec,
            inputs=rng.standard_normal((6, 3)),
            targets=rng.standard_normal((6, 2)),
        )
        numeric = finite_diff_grad(obj, p)
        analytic = grad_scalar(obj, p).values
        assert max_rel_error(analytic, numeric) < 1e-4

    def test_gradient_checks_100_random_nets(self, rng):
        # MSE loss and Gaussian log-prob over 100 random small nets.
        for trial in range(100):
            spec = random_spec(rng, max_width=5)
            p = mlp_init(spec, int(rng.integers(0, 10_000)))
            n = int(rng.integers(1, 5))
            x = rng.standard_normal((n, spec.input_dim))
            if trial % 2 == 0:
                obj = MseObjective(spec=spec, inputs=x,
                                   targets=rng.standard_normal((n, spec.output_dim)))
                params = p
            else:
                obj = PolicyLogProbObjective(
                    spec=spec, observations=x,
                    actions=rng.standard_normal((n, spec.output_dim)),
                )
                params = ParamVector(
                    values=np.concatenate(
                        [p.values, rng.uniform(-1, 0.3, spec.output_dim)]
                    ),
                    layout=policy_layout(spec),
                )
            numeric = finite_diff_grad(obj, params)
            analytic = obj.gradient(params).values
            assert max_rel_error(analytic, numeric) < 1e-4, f"trial {trial} failed"


class TestBackward:
    def test_backward_sums_over_batch(self, rng):
        spec = MlpSpec(3, (4,), 2)
        p = mlp_init(spec, 17)
        xs = rng.standard_normal((5, 3))
        douts = rng.standard_normal((5, 2))
        _, acts = mlp_forward_cached(p, spec, xs)
        total = mlp_backward(p, spec, acts, douts)
        single_sum = np.zeros_like(total)
        for i in range(5):
            _, acts_i = mlp_forward_cached(p, spec, xs[i : i + 1])
            single_sum += mlp_backward(p, spec, acts_i, douts[i : i + 1])
        assert np.allclose(total, single_sum, atol=1e-12)


class TestGaussian:
    def test_standard_normal_at_zero(self):
        lp = gaussian_logprob(np.zeros(1), np.zeros(1), np.zeros(1))
        assert lp == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)
        assert lp == pytest.approx(-0.9189385332046727, abs=1e-10)

    def test_at_mode_closed_form(self, rng):
        for d in (1, 2, 5):
            mean = rng.standard_normal(d)
            log_std = rng.uniform(-1.0, 1.0, d)
            lp = gaussian_logprob(mean, log_std, mean)
            assert lp == pytest.approx(-log_std.sum() - 0.5 * d * LOG_2PI, abs=1e-12)

    def test_translation_invariance(self, rng):
        mean = rng.standard_normal(3)
        log_std = rng.uniform(-1, 1, 3)
        a = rng.standard_normal(3)
        shift = rng.standard_normal(3)
        assert gaussian_logprob(mean, log_std, a) == pytest.approx(
            gaussian_logprob(mean + shift, log_std, a + shift), abs=1e-12
        )

    def test_density_integrates_to_one_1d(self):
        # Trapezoid over a wide grid for a 1-D Gaussian.
        mean = np.array([0.3])
        log_std = np.array([-0.2])
        grid = np.linspace(-8, 8, 20_001)
        dens = np.array(
            [math.exp(gaussian_logprob(mean, log_std, np.array([g]))) for g in grid]
        )
        integral = np.trapezoid(dens, grid)
        assert abs(integral - 1.0) < 1e-3

    def test_sample_reproducible(self):
        mean = np.array([1.0, -2.0])
        log_std = np.array([0.1, -0.5])
        a = gaussian_sample(mean, log_std, np.random.default_rng(99))
        b = gaussian_sample(mean, log_std, np.random.default_rng(99))
        assert np.array_equal(a, b)

    def test_sample_mean_monte_carlo(self):
        rng = np.random.default_rng(4)
        mean = np.array([0.7])
        log_std = np.array([0.0])  # unit std
        samples = np.array([gaussian_sample(mean, log_std, rng)[0] for _ in range(100_000)])
        assert abs(samples.mean() - 0.7) < 0.02

    def test_deterministic_mode_uses_mean(self, rng):
        policy = policy_init(MlpSpec(3, (4,), 2), seed=0)
        obs = rng.standard_normal(3)
        action, _ = policy.act(obs, None)
        assert np.array_equal(action, policy.mean(obs))


class TestGaussianPolicy:
    def test_flat_roundtrip(self, rng):
        policy = policy_init(MlpSpec(5, (8,), 2), seed=13)
        flat = policy.flat()
        rebuilt = policy.with_flat(flat)
        assert np.array_equal(rebuilt.params.values, policy.params.values)
        assert np.array_equal(rebuilt.log_std, policy.log_std)

    def test_log_std_init_value(self):
        policy = policy_init(MlpSpec(5, (64, 64), 2), seed=0)
        assert np.allclose(policy.log_std, math.log(0.5))

    def test_nonfinite_log_std_rejected(self):
        spec = MlpSpec(2, (3,), 1)
        with pytest.raises(NetsError):
            GaussianPolicy(spec=spec, params=mlp_init(spec, 0),
                           log_std=np.array([np.inf]))

    def test_logprob_gradient_includes_log_std(self, rng):
        spec = MlpSpec(3, (4,), 2)
        policy = policy_init(spec, seed=5)
        obs = rng.standard_normal((4, 3))
        actions = rng.standard_normal((4, 2))
        obj = PolicyLogProbObjective(spec=spec, observations=obs, actions=actions)
        flat = policy.flat()
        numeric = finite_diff_grad(obj, flat)
        analytic = obj.gradient(flat).values
        assert max_rel_error(analytic, numeric) < 1e-4
        # log_std entries are the last two and must carry nonzero gradient
        assert np.any(analytic[-2:] != 0.0)
