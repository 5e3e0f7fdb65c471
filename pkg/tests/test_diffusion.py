import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftlab.diagnostics import AnalyticMixture
from graftlab.diffusion import (NoiseSchedule, denoise, dsm_batch, dsm_loss, eps_loss,
                                ou_marginal, pgraft_training_pair, recalibrate_schedule,
                                sample_stitched, sample_trajectory, train_eps_pairs,
                                train_score_model)
from graftlab.numerics import FieldModel, finite_difference_grad, relative_error, rng_stream


def gaussian_score(x, t):
    return -x


class TestSchedule:
    def test_linear_defaults(self):
        s = NoiseSchedule.linear()
        assert s.N == 1000
        ab = s.alphas_cumprod
        assert ab[0] == 1.0 and len(ab) == 1001
        assert np.all(np.diff(ab) < 0) and np.all(ab > 0)

    def test_ou_times_match_cumprod(self):
        s = NoiseSchedule.linear(50)
        np.testing.assert_allclose(np.exp(-2 * s.ou_times), s.alphas_cumprod, rtol=1e-14)

    def test_rejects_nonpositive_betas(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.1, 0.0]))
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([1.0]))


class TestRecalibrate:
    def test_zero_is_identity(self):
        s = NoiseSchedule.linear(20)
        assert recalibrate_schedule(s, 0) is s

    def test_cumprod_is_one_below_switch(self):
        s = NoiseSchedule.linear(20)
        r = recalibrate_schedule(s, 8)
        np.testing.assert_array_equal(r.alphas_cumprod[:9], 1.0)

    def test_constant_beta_power_law(self):
        beta, N = 0.01, 40
        r = recalibrate_schedule(NoiseSchedule(np.full(N, beta)), N // 2)
        t = np.arange(N // 2, N + 1)
        np.testing.assert_allclose(r.alphas_cumprod[t], (1 - beta) ** (t - N // 2), rtol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 30))
    def test_agrees_with_original_at_and_above_switch(self, n_i):
        s = NoiseSchedule.linear(30)
        r = recalibrate_schedule(s, n_i)
        np.testing.assert_array_equal(r.betas[n_i:], s.betas[n_i:])
        np.testing.assert_array_equal(r.betas[:n_i], 0.0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            recalibrate_schedule(NoiseSchedule.linear(10), 11)


class TestOuMarginal:
    def test_zero_time(self):
        m, s = ou_marginal(np.array([1.5, -2.0]), 0.0)
        np.testing.assert_array_equal(m, [1.5, -2.0])
        assert s == 0.0

    def test_infinite_time(self):
        m, s = ou_marginal(np.array([3.0]), np.inf)
        np.testing.assert_array_equal(m, 0.0)
        assert s == 1.0

    def test_log_two(self):
        m, s = ou_marginal(np.array([4.0]), np.log(2))
        np.testing.assert_allclose(m, [2.0], rtol=1e-15)
        np.testing.assert_allclose(s, np.sqrt(3) / 2, rtol=1e-15)

    def test_negative_time(self):
        with pytest.raises(ValueError):
            ou_marginal(np.zeros(1), -0.1)


class TestDsm:
    def test_zero_model_single_sample(self):
        m = FieldModel.zeros(2, hidden=(4,), time_dim=4)
        x0 = np.array([[0.5, -1.0]])
        g = np.random.default_rng(3)
        loss = dsm_loss(m, x0, g, t=0.4)
        # replay the same draw
        xt, _, _ = dsm_batch(x0, np.random.default_rng(3), t=0.4)
        expected = np.sum(((xt - np.exp(-0.4) * x0) / (1 - np.exp(-0.8))) ** 2)
        np.testing.assert_allclose(loss, expected, rtol=1e-14)

    def test_time_clamped(self):
        _, t, _ = dsm_batch(np.zeros((5, 1)), 0, t=0.0)
        np.testing.assert_array_equal(t, 1e-3)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            dsm_loss(FieldModel.zeros(1, (2,), 4), np.zeros((0, 1)), 0)

    def test_gradient_matches_finite_differences(self, small_model):
        x0 = np.random.default_rng(0).standard_normal((16, 2))

        def loss_of(params):
            return dsm_loss(small_model.with_params(params), x0, 5)

        _, grads = dsm_loss(small_model, x0, 5, grad=True)
        fd = finite_difference_grad(loss_of, small_model.params, h=1e-6)
        for g, f in zip(grads, fd):
            assert relative_error(g, f) < 1e-5

    def test_exact_score_gradient_at_noise_floor(self):
        """With the exact Gaussian score hard-wired, the batch gradient is zero
        in expectation; at 1e5 samples it must sit within 4 standard errors of
        zero, while a perturbed field is many standard errors away."""
        n = 100_000
        x0 = rng_stream(1, "dsm-floor").standard_normal((n, 1))

        def per_sample_grad(scale):
            m = FieldModel.linear(np.array([[-scale]]))
            xt, t, target = dsm_batch(x0, rng_stream(1, "dsm-noise"))
            res = m(xt, t) - target
            # nonzero gradient entries: output bias and skip matrix
            return np.concatenate([2 * res, 2 * res * xt], axis=1)

        g = per_sample_grad(1.0)
        se = g.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(g.mean(axis=0)) < 4 * se)
        bad = per_sample_grad(0.8)
        assert np.linalg.norm(bad.mean(axis=0)) > 10 * np.linalg.norm(se)

    def test_exact_score_gradient_matches_model_grad(self):
        m = FieldModel.linear(np.array([[-1.0]]), hidden=(4,), time_dim=4)
        x0 = np.random.default_rng(2).standard_normal((500, 1))
        xt, t, target = dsm_batch(x0, 9)
        _, grads = dsm_loss(m, x0, 9, grad=True)
        res = m(xt, t) - target
        np.testing.assert_allclose(grads[-1], [[np.mean(2 * res * xt)]], rtol=1e-12)
        np.testing.assert_allclose(grads[-2], [np.mean(2 * res)], rtol=1e-12)
        for gg in grads[:-3]:
            np.testing.assert_array_equal(gg, 0.0)


class TestPgraftPair:
    def setup_method(self):
        # alphas_cumprod = [1, 0.64, 0.16]; recalibrated at 1 -> [1, 1, 0.25]
        self.s = NoiseSchedule(np.array([0.36, 0.75]))
        self.r = recalibrate_schedule(self.s, 1)

    def test_hand_evaluation(self):
        xt, eps = pgraft_training_pair(np.array([2.0]), np.array([1.0]), 2, self.s, self.r,
                                       eps=np.zeros(1))
        np.testing.assert_allclose(xt, [1.0], rtol=1e-15)
        np.testing.assert_allclose(eps, [(1.0 - 0.4) / np.sqrt(0.84)], rtol=1e-14)
        np.testing.assert_allclose(eps, [0.6546536707079771], rtol=1e-12)

    def test_at_switch_returns_latent(self):
        xt, _ = pgraft_training_pair(np.array([2.0]), np.array([1.0]), 1, self.s, self.r, rng=0)
        np.testing.assert_array_equal(xt, [2.0])

    def test_below_switch_rejected(self):
        r = recalibrate_schedule(NoiseSchedule.linear(10), 5)
        with pytest.raises(ValueError):
            pgraft_training_pair(np.zeros(1), np.zeros(1), 4, NoiseSchedule.linear(10), r, rng=0)

    def test_noising_consistent_with_forward_marginal(self):
        """Noising a true latent with the recalibrated schedule reproduces
        the forward law given x0: eps' is standard normal."""
        s = NoiseSchedule.linear(100)
        r = recalibrate_schedule(s, 30)
        g = np.random.default_rng(0)
        n = 200_000
        x0 = g.standard_normal((n, 1)) * 0.3 + 1.0
        ab = s.alphas_cumprod[30]
        x30 = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * g.standard_normal((n, 1))
        _, eps = pgraft_training_pair(x30, x0, 70, s, r, g)
        assert abs(eps.mean()) < 4 / np.sqrt(n)
        assert abs(eps.var() - 1) < 4 * np.sqrt(2 / n)

    def test_eps_loss_gradient(self, small_model):
        s = NoiseSchedule.linear(50)
        g = np.random.default_rng(1)
        xt = g.standard_normal((12, 2))
        n = g.integers(1, 51, size=12)
        eps = g.standard_normal((12, 2))
        _, grads = eps_loss(small_model, xt, n, eps, s, grad=True)
        fd = finite_difference_grad(
            lambda p: eps_loss(small_model.with_params(p), xt, n, eps, s), small_model.params,
            h=1e-6)
        for a, b in zip(grads, fd):
            assert relative_error(a, b) < 1e-5


class TestSampler:
    def test_exact_gaussian_score_moments(self):
        s = NoiseSchedule.linear(1000)
        traj = sample_trajectory(gaussian_score, s, rng_stream(0, "sampler"), n_samples=10_000,
                                 dim=1)
        x = traj.final[:, 0]
        n = len(x)
        assert abs(x.mean()) < 3 * x.std() / np.sqrt(n)
        assert abs(x.var(ddof=1) - 1) < 3 * np.sqrt(2 / (n - 1))

    def test_snapshot_at_N_is_initial_draw(self):
        s = NoiseSchedule.linear(20)
        traj = sample_trajectory(gaussian_score, s, 0, n_samples=5, dim=2, snapshot=20)
        np.testing.assert_array_equal(traj.snapshot, traj.initial)

    def test_path_length_and_snapshot_consistency(self):
        s = NoiseSchedule.linear(30)
        traj = sample_trajectory(gaussian_score, s, 4, n_samples=3, dim=2, snapshot=12,
                                 keep_path=True)
        assert traj.states.shape == (31, 3, 2)
        np.testing.assert_array_equal(traj.states[12], traj.snapshot)
        np.testing.assert_array_equal(traj.states[0], traj.final)
        np.testing.assert_array_equal(traj.states[30], traj.initial)

    def test_snapshot_out_of_range(self):
        with pytest.raises(ValueError):
            sample_trajectory(gaussian_score, NoiseSchedule.linear(10), 0, 2, dim=1, snapshot=11)

    def test_replay_is_identical(self):
        s = NoiseSchedule.linear(40)
        a = sample_trajectory(gaussian_score, s, rng_stream(3, "t"), 4, dim=2, keep_path=True)
        b = sample_trajectory(gaussian_score, s, rng_stream(3, "t"), 4, dim=2, keep_path=True)
        np.testing.assert_array_equal(a.states, b.states)

    def test_exact_mixture_score_recovers_weights(self):
        mix = AnalyticMixture([[-3.0, 0.0], [3.0, 0.0]], [0.25, 0.25], [0.3, 0.7])
        s = NoiseSchedule.linear(1000)
        n = 4000
        x = sample_trajectory(lambda x, t: mix.score(x, float(t[0])), s, rng_stream(0, "mix"),
                              n_samples=n, dim=2).final
        freq = np.mean(mix.assign(x) == 0)
        assert abs(freq - 0.3) < 3 * np.sqrt(0.3 * 0.7 / n)

    def test_deterministic_variant_needs_no_noise(self):
        s = NoiseSchedule.linear(50)
        x = np.ones((3, 1))
        a, _, _ = denoise(gaussian_score, s, x, 50, rng=0, stochastic=False)
        b, _, _ = denoise(gaussian_score, s, x, 50, rng=1, stochastic=False)
        np.testing.assert_array_equal(a, b)

    def test_stitched_with_identical_models_equals_plain(self):
        s = NoiseSchedule.linear(40)
        m = FieldModel(2, (8,), 4, rng=0)
        a = sample_stitched(m, m, s, 10, rng_stream(0, "x"), 6)
        b = sample_trajectory(m, s, rng_stream(0, "x"), 6)
        np.testing.assert_array_equal(a.final, b.final)

    def test_stitched_switches_once(self):
        s = NoiseSchedule.linear(40)
        calls = []

        def fine(x, t):
            calls.append("fine")
            return -x

        def ref(x, t):
            calls.append("ref")
            return -x

        sample_stitched(fine, ref, s, 15, 0, 2, dim=1)
        assert calls == ["fine"] * 25 + ["ref"] * 15

    def test_stitched_switch_at_zero_never_uses_reference(self):
        s = NoiseSchedule.linear(10)
        used = []
        sample_stitched(lambda x, t: -x, lambda x, t: used.append(1) or -x, s, 0, 0, 2, dim=1)
        assert not used


class TestTrainedScore:
    def test_matches_analytic_score_on_high_density_region(self, trained_1d):
        mix, s, m = trained_1d
        g = rng_stream(0, "eval")
        errs = []
        for n in (100, 250, 500, 750, 1000):
            t = float(s.ou_times[n])
            x = mix.sample(2000, g, t=t)
            errs.append(np.mean((m(x, t) - mix.score(x, t)) ** 2))
        assert np.mean(errs) < 0.05

    def test_no_tilt_eps_training_keeps_reference_behaviour(self, trained_1d):
        """Training on (latent, final) pairs of every reference sample leaves
        the sampler's law unchanged."""
        mix, s, ref = trained_1d
        n_i = 250
        x_start = rng_stream(1, "start").standard_normal((8192, 1))
        final, rec, _ = denoise(ref, s, x_start, s.N, rng_stream(1, "roll"), record={n_i})
        fine = ref.copy()
        train_eps_pairs(fine, rec[n_i], final, s, n_i, 500, rng_stream(1, "ft"), lr=3e-4)
        a = sample_stitched(fine, ref, s, n_i, rng_stream(2, "e"), 4096).final
        b = sample_trajectory(ref, s, rng_stream(3, "e"), n_samples=4096).final
        pa, pb = np.mean(a > 0), np.mean(b > 0)
        se = np.sqrt(pa * (1 - pa) / 4096 + pb * (1 - pb) / 4096)
        assert abs(pa - pb) < 3 * se


class TestGaussianTargetTraining:
    def test_distance_to_exact_score_decreases(self):
        s = NoiseSchedule.linear(200)
        data = rng_stream(0, "g").standard_normal((10_000, 1))
        m = FieldModel(1, (16,), rng=1)
        grid_x = np.linspace(-2, 2, 41)[:, None]
        grid_t = s.ou_times[[20, 100, 200]]

        def dev():
            return np.mean([np.mean((m(grid_x, t) + grid_x) ** 2) for t in grid_t])

        # checkpoints after doubling budgets with a halving learning rate, so
        # each stage ends below the previous stage's SGD noise floor
        devs = [dev()]
        for k in range(4):
            train_score_model(m, data, s, 250 * 2 ** k, rng_stream(k, "gt"), batch_size=512,
                              lr=1e-3 / 2 ** k)
            devs.append(dev())
        assert all(b < a for a, b in zip(devs, devs[1:]))
