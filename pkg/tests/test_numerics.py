import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftlab.numerics import (AdamConfig, FieldModel, NonFiniteGradientError, RngStream,
                               ShiftedField, as_generator, finite_difference_grad, model_grad,
                               mse_to_target, optimizer_step, relative_error, rng_stream, silu,
                               silu_grad, time_features, train)


class TestRngStreams:
    def test_same_pair_replays(self):
        a = rng_stream(7, "sampling").standard_normal(20)
        b = rng_stream(7, "sampling").standard_normal(20)
        np.testing.assert_array_equal(a, b)

    def test_distinct_names_differ(self):
        a = rng_stream(7, "sampling").standard_normal(20)
        b = rng_stream(7, "training").standard_normal(20)
        assert not np.allclose(a, b)

    def test_distinct_seeds_differ(self):
        assert rng_stream(1, 0).random() != rng_stream(2, 0).random()

    def test_children_are_independent_streams(self):
        root = RngStream(5, 0)
        a = root.child("a").generator().random(10)
        b = root.child("b").generator().random(10)
        assert not np.allclose(a, b)

    def test_as_generator_accepts_all_forms(self):
        g = np.random.default_rng(0)
        assert as_generator(g) is g
        assert as_generator(3).random() == rng_stream(3).random()
        assert as_generator(RngStream(3, 0)).random() == RngStream(3, 0).generator().random()


class TestActivation:
    def test_silu_values(self):
        np.testing.assert_allclose(silu(np.array([0.0, 1.0])), [0.0, 1 / (1 + np.exp(-1))])

    def test_silu_grad_matches_difference_quotient(self):
        z = np.linspace(-8, 8, 401)
        h = 1e-6
        np.testing.assert_allclose(silu_grad(z), (silu(z + h) - silu(z - h)) / (2 * h),
                                   rtol=1e-7, atol=1e-9)

    def test_time_features_shape_and_range(self):
        f = time_features(np.array([0.0, 0.5, 3.0]), 8)
        assert f.shape == (3, 8)
        assert np.all(np.abs(f) <= 1)
        np.testing.assert_array_equal(f[0, 4:], 1.0)

    def test_time_features_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            time_features(0.1, 5)


class TestFieldModel:
    def test_output_shape(self, small_model):
        x = np.zeros((7, 2))
        assert small_model(x, 0.3).shape == (7, 2)
        assert small_model(np.zeros(2), 0.3).shape == (2,)

    def test_zero_model_outputs_zero(self):
        m = FieldModel.zeros(3, hidden=(4,), time_dim=4)
        np.testing.assert_array_equal(m(np.ones((5, 3)), np.linspace(0, 1, 5)), 0.0)

    def test_linear_model_is_exact(self):
        A = np.array([[2.0, 0.5], [-1.0, 0.0]])
        m = FieldModel.linear(A)
        x = np.random.default_rng(0).standard_normal((10, 2))
        np.testing.assert_allclose(m(x, 0.7), x @ A, rtol=0, atol=1e-15)

    def test_dimension_mismatch_rejected(self, small_model):
        with pytest.raises(ValueError):
            small_model(np.zeros((3, 3)), 0.0)

    def test_bad_param_shapes_rejected(self):
        with pytest.raises(ValueError):
            FieldModel(2, hidden=(3,), time_dim=4, params=[np.zeros((2, 2))])

    def test_copy_is_deep(self, small_model):
        c = small_model.copy()
        c.params[0][0, 0] += 1.0
        assert c.params[0][0, 0] != small_model.params[0][0, 0]

    def test_init_deterministic_in_seed(self):
        a = FieldModel(2, (8,), 4, rng=11)
        b = FieldModel(2, (8,), 4, rng=11)
        for p, q in zip(a.params, b.params):
            np.testing.assert_array_equal(p, q)

    def test_flops_counts_matmuls(self):
        m = FieldModel(2, hidden=(3,), time_dim=4)
        assert m.flops_per_eval() == 2 * (6 * 3 + 3 * 2 + 2 * 2)


class TestGradients:
    """Reverse-mode gradients against central differences."""

    def _check(self, model, x, t, loss_fn, tol=1e-5):
        _, grads = model_grad(model, x, t, loss_fn)

        def loss_of(params):
            return loss_fn(model.with_params(params).forward(x, t)[0])[0]

        fd = finite_difference_grad(loss_of, model.params, h=1e-6)
        for g, f in zip(grads, fd):
            assert relative_error(g, f) < tol

    def test_mse_gradient(self, small_model, rng):
        small_model.params[-1] = rng.standard_normal((2, 2))
        x = rng.standard_normal((9, 2))
        t = rng.random(9)
        self._check(small_model, x, t, mse_to_target(rng.standard_normal((9, 2))))

    def test_weighted_mse_gradient(self, small_model, rng):
        x = rng.standard_normal((6, 2))
        loss = mse_to_target(rng.standard_normal((6, 2)), weight=rng.random(6))
        self._check(small_model, x, rng.random(6), loss)

    def test_deep_model_gradient(self, rng):
        m = FieldModel(3, hidden=(4, 4, 3), time_dim=6, rng=rng)
        x = rng.standard_normal((5, 3))
        self._check(m, x, rng.random(5), mse_to_target(rng.standard_normal((5, 3))))

    def test_shifted_field_gradient_ignores_offset(self, small_model, rng):
        sf = ShiftedField(small_model, lambda x, t: 3.0 * x)
        x = rng.standard_normal((4, 2))
        t = rng.random(4)
        target = rng.standard_normal((4, 2))
        _, grads = model_grad(sf, x, t, mse_to_target(target))

        def loss_of(params):
            return mse_to_target(target)(
                ShiftedField(small_model.with_params(params), sf.offset).forward(x, t)[0])[0]

        fd = finite_difference_grad(loss_of, small_model.params, h=1e-6)
        for g, f in zip(grads, fd):
            assert relative_error(g, f) < 1e-5

    def test_sampled_entries_mode(self, small_model, rng):
        x = rng.standard_normal((4, 2))
        t = rng.random(4)
        loss_fn = mse_to_target(np.ones((4, 2)))
        _, grads = model_grad(small_model, x, t, loss_fn)
        picks = finite_difference_grad(
            lambda p: loss_fn(small_model.with_params(p).forward(x, t)[0])[0],
            small_model.params, h=1e-6, entries=20, rng=1)
        for k, j, v in picks:
            np.testing.assert_allclose(grads[k].reshape(-1)[j], v, rtol=1e-5, atol=1e-9)


class TestOptimizer:
    def test_adam_first_step_moves_by_lr(self):
        p = [np.array([1.0, -2.0])]
        g = [np.array([0.5, -3.0])]
        new, state = optimizer_step(p, g, None, AdamConfig(lr=0.1))
        np.testing.assert_allclose(new[0], [0.9, -1.9], atol=1e-7)
        assert state.step == 1

    def test_nan_gradient_rejected_and_params_untouched(self):
        p = [np.array([1.0])]
        with pytest.raises(NonFiniteGradientError):
            optimizer_step(p, [np.array([np.nan])])
        np.testing.assert_array_equal(p[0], [1.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            optimizer_step([np.zeros(2)], [np.zeros(3)])

    def test_train_reduces_quadratic_loss(self):
        m = FieldModel(1, hidden=(8,), time_dim=4, rng=0)
        x = np.linspace(-1, 1, 64)[:, None]

        def step(model, g):
            return model_grad(model, x, np.zeros(64), mse_to_target(2.0 * x))

        losses = train(m, step, 300, 0, lr=1e-2)
        assert losses[-1] < 0.05 * losses[0]

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_adam_step_bounded_by_lr(self, g):
        p = [np.zeros(3)]
        new, _ = optimizer_step(p, [np.array(g)], None, AdamConfig(lr=0.01))
        assert np.all(np.abs(new[0]) <= 0.01 + 1e-12)
