"""Gradient engine, optimizer, objectives, and the training loop."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from scoreflow.errors import DomainError, NumericalDivergenceError
from scoreflow.nn import (
    NULL_LABEL,
    AdamOptimizer,
    MlpDenoiser,
    adam_step,
    ema_update,
)
from scoreflow.oracle import gmm_denoise, make_gmm
from scoreflow.schedules import LossWeighting, TrainNoiseSampler
from scoreflow.training import (
    TrainConfig,
    _loss_and_grads,
    compute_loss,
    drop_condition,
    dump_model,
    parse_model,
    reference_training_config,
    train_loop,
    TrainedDenoiser,
)


def small_mlp(conditioning="none", rng_seed=3, **kw):
    return MlpDenoiser(dim=2, hidden=(16, 16), conditioning=conditioning,
                       rng=np.random.default_rng(rng_seed), **kw)


class TestForward:
    def test_zero_weights_zero_output(self):
        mlp = small_mlp()
        for name in mlp.params:
            mlp.params[name] = np.zeros_like(mlp.params[name])
        out = mlp.forward(np.random.default_rng(0).normal(size=(5, 2)), 0.3)
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_null_label_matches_no_modulation(self):
        mlp = small_mlp(conditioning="adaln", n_labels=3)
        x = np.random.default_rng(1).normal(size=(4, 2))
        with_null = mlp.forward(x, 0.1, labels=np.full(4, NULL_LABEL))
        bare = mlp.forward(x, 0.1, labels=None)
        np.testing.assert_array_equal(with_null, bare)

    def test_determinism(self):
        a = small_mlp(rng_seed=11)
        b = small_mlp(rng_seed=11)
        x = np.random.default_rng(2).normal(size=(3, 2))
        np.testing.assert_array_equal(a.forward(x, -0.5), b.forward(x, -0.5))

    def test_shape_mismatch(self):
        mlp = small_mlp()
        with pytest.raises(DomainError):
            mlp.forward(np.zeros((2, 3)), 0.0)

    def test_channel_concat_requires_obs(self):
        mlp = small_mlp(conditioning="channel_concat", obs_dim=2)
        with pytest.raises(DomainError):
            mlp.forward(np.zeros((2, 2)), 0.0)


class TestGradients:
    @staticmethod
    def loss_fn(mlp, objective, conditioning, seed=123):
        gmm = make_gmm([(0.4, [0.5, -0.5], 0.3), (0.6, [-0.5, 0.5], 0.3)])
        rng = np.random.default_rng(seed)
        x0 = rng.normal(0.0, 0.7, size=(8, 2))
        labels = np.array([0, 1, 0, 1, NULL_LABEL, 0, 1, 0])
        obs = x0 + 0.5 * np.random.default_rng(seed + 1).normal(size=(8, 2))
        kw = {}
        if conditioning == "adaln":
            kw["labels"] = labels
        elif conditioning == "channel_concat":
            kw["obs"] = obs
        noise_spec = TrainNoiseSampler(kind="log_normal", p_mean=-0.6, p_std=1.0)
        return _loss_and_grads(
            objective, mlp, x0, noise_spec, LossWeighting(sigma_data=0.5),
            np.random.default_rng(seed + 2), 0.5, **kw,
        )

    @pytest.mark.parametrize("conditioning,objective", [
        ("none", "edm_denoise"),
        ("none", "epsilon"),
        ("none", "v_pred"),
        ("none", "rectified_flow"),
        ("adaln", "edm_denoise"),
        ("channel_concat", "edm_denoise"),
    ])
    def test_matches_finite_differences(self, conditioning, objective):
        kw = {}
        if conditioning == "adaln":
            kw = {"n_labels": 2}
        elif conditioning == "channel_concat":
            kw = {"obs_dim": 2}
        mlp = small_mlp(conditioning=conditioning, **kw)
        _, grads = self.loss_fn(mlp, objective, conditioning)
        probe_rng = np.random.default_rng(7)
        names = sorted(mlp.params)
        checked = 0
        worst = 0.0
        while checked < 20:
            name = names[probe_rng.integers(len(names))]
            p = mlp.params[name]
            if p.size == 0:
                continue
            idx = np.unravel_index(probe_rng.integers(p.size), p.shape)
            base = p[idx]
            h = 1e-4 * max(abs(base), 1.0)
            p[idx] = base + h
            lo_plus, _ = self.loss_fn(mlp, objective, conditioning)
            p[idx] = base - h
            lo_minus, _ = self.loss_fn(mlp, objective, conditioning)
            p[idx] = base
            fd = (lo_plus - lo_minus) / (2 * h)
            got = grads[name][idx]
            scale = max(abs(fd), abs(got), 1e-8)
            worst = max(worst, abs(got - fd) / scale)
            checked += 1
        assert worst < 1e-3

    def test_unused_condition_pathway_gets_zero_gradient(self):
        # adaln params exist but every label is null: their grads vanish.
        mlp = small_mlp(conditioning="adaln", n_labels=2)
        x = np.random.default_rng(0).normal(size=(6, 2))
        out, cache = mlp.forward(x, 0.2, labels=np.full(6, NULL_LABEL),
                                 want_cache=True)
        grads = mlp.backward(cache, np.ones_like(out))
        for name in grads:
            if name.startswith("adaln") or name == "label_embed":
                np.testing.assert_array_equal(grads[name], 0.0)

    def test_no_condition_params_when_mode_none(self):
        mlp = small_mlp()
        assert not any(n.startswith("adaln") or n == "label_embed"
                       for n in mlp.params)

    def test_gradient_linearity(self):
        mlp = small_mlp()
        x = np.random.default_rng(4).normal(size=(5, 2))
        out, cache = mlp.forward(x, 0.1, want_cache=True)
        dout = np.random.default_rng(5).normal(size=out.shape)
        g1 = mlp.backward(cache, dout)
        g2 = mlp.backward(cache, 2.0 * dout)
        for name in g1:
            np.testing.assert_allclose(g2[name], 2.0 * g1[name], rtol=1e-12)


class TestAdam:
    def test_zero_gradient_no_decay_fixed_point(self):
        opt = AdamOptimizer(lr=0.1)
        params = {"w": np.array([1.0, -2.0])}
        adam_step(opt, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_magnitude(self):
        opt = AdamOptimizer(lr=0.01)
        params = {"w": np.zeros(3)}
        g = np.array([0.5, -2.0, 1e-3])
        adam_step(opt, params, {"w": g})
        # bias-corrected first step moves by ~lr in the -sign(g) direction
        np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-3)

    def test_quadratic_bowl(self):
        opt = AdamOptimizer(lr=0.05)
        params = {"p": np.array([3.0, -4.0])}
        start = float(np.sum(params["p"] ** 2))
        for _ in range(500):
            opt.step(params, {"p": 2.0 * params["p"]})
        assert np.sum(params["p"] ** 2) < start / 100.0

    def test_decoupled_weight_decay(self):
        opt = AdamOptimizer(lr=0.1, weight_decay=0.5)
        params = {"w": np.array([2.0])}
        adam_step(opt, params, {"w": np.zeros(1)})
        # zero gradient: only the decay term acts, p -= lr * wd * p
        np.testing.assert_allclose(params["w"], [2.0 * (1 - 0.05)])


class TestEma:
    def test_beta_zero_copies(self):
        ema = {"w": np.zeros(2)}
        ema_update(ema, {"w": np.array([1.0, 2.0])}, 0.0)
        np.testing.assert_array_equal(ema["w"], [1.0, 2.0])

    def test_constant_params_fixed_point(self):
        ema = {"w": np.array([1.0])}
        ema_update(ema, {"w": np.array([1.0])}, 0.9)
        np.testing.assert_array_equal(ema["w"], [1.0])

    def test_geometric_convergence(self):
        beta = 0.9
        ema = {"w": np.array([0.0])}
        target = {"w": np.array([1.0])}
        for k in range(1, 21):
            ema_update(ema, target, beta)
            assert ema["w"][0] == pytest.approx(1.0 - beta**k, abs=1e-12)

    def test_invalid_beta(self):
        with pytest.raises(DomainError):
            ema_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 1.0)


class TestDropCondition:
    def test_extremes(self):
        rng = np.random.default_rng(0)
        assert drop_condition(5, 0.0, rng) == 5
        assert drop_condition(5, 1.0, rng) is None

    def test_fraction(self):
        rng = np.random.default_rng(1)
        dropped = sum(drop_condition(1, 0.1, rng) is None for _ in range(100_000))
        assert abs(dropped / 100_000 - 0.1) < 0.005


class TestLossClosedForms:
    def test_perfect_oracle_zero_loss(self):
        # substituting the exact posterior mean as D gives zero residual on
        # Dirac data regardless of sigma
        gmm = make_gmm([(1.0, [0.3, -0.3], 0.0)])
        rng = np.random.default_rng(0)
        x0 = np.tile([0.3, -0.3], (64, 1))
        sigma = TrainNoiseSampler().sample(rng, 64)
        noise = rng.standard_normal((64, 2))
        x = x0 + sigma[:, None] * noise
        denoised = np.stack([gmm_denoise(gmm, xi, si) for xi, si in zip(x, sigma)])
        w = LossWeighting(sigma_data=0.5).weight(sigma)[:, None]
        assert float(np.mean(w * (denoised - x0) ** 2)) == pytest.approx(0.0, abs=1e-20)

    def test_zero_network_edm_loss_expectation(self):
        # raw output 0 => D = c_skip * x; on Dirac-at-zero data the per-element
        # loss is E[lambda c_skip^2 sigma^2] = E[sd^2 / (sigma^2 + sd^2)]
        sd = 0.5
        spec = TrainNoiseSampler(kind="log_normal", p_mean=-1.2, p_std=1.2)

        def integrand(z):
            sigma2 = math.exp(2 * z)
            return norm.pdf(z, -1.2, 1.2) * sd**2 / (sigma2 + sd**2)

        want, _ = quad(integrand, -12.0, 12.0)
        mlp = MlpDenoiser(dim=1, hidden=(8,), rng=np.random.default_rng(0))
        for name in mlp.params:
            mlp.params[name] = np.zeros_like(mlp.params[name])
        x0 = np.zeros((200_000, 1))
        got = compute_loss("edm_denoise", mlp, x0, spec,
                           LossWeighting(sigma_data=sd),
                           np.random.default_rng(8), sigma_data=sd)
        assert got == pytest.approx(want, rel=0.02)

    def test_constant_network_rectified_flow_loss(self):
        # model == c: per-element loss is E[(c + x0/sd - n)^2] = (c + m/sd)^2 + 1
        c, m, sd = 0.7, 0.4, 0.5
        mlp = MlpDenoiser(dim=1, hidden=(8,), rng=np.random.default_rng(0))
        for name in mlp.params:
            mlp.params[name] = np.zeros_like(mlp.params[name])
        mlp.params["b_out"] = np.array([c])
        gmm_x0 = np.full((200_000, 1), m)
        got = compute_loss("rectified_flow", mlp, gmm_x0, TrainNoiseSampler(),
                           LossWeighting(sigma_data=sd),
                           np.random.default_rng(9), sigma_data=sd)
        want = (c + m / sd) ** 2 + 1.0
        assert got == pytest.approx(want, rel=0.02)


class TestTrainLoop:
    CFG = TrainConfig(steps=600, batch=64, hidden=(32, 32), lr=2e-3,
                      sigma_data=1.0, log_every=25, seed=5)

    def _data(self):
        return make_gmm([(0.5, [1.0, 0.0], 0.25), (0.5, [-1.0, 0.0], 0.25)])

    def test_loss_decreases(self):
        result = train_loop(self.CFG, self._data())
        losses = [v for _, v in result.loss_curve]
        head = np.mean(losses[:4])
        tail = np.mean(losses[-4:])
        assert tail < 0.5 * head

    def test_bit_identical_given_seed(self):
        a = train_loop(self.CFG, self._data())
        b = train_loop(self.CFG, self._data())
        assert a.loss_curve == b.loss_curve
        for name in a.model.mlp.params:
            np.testing.assert_array_equal(
                a.model.mlp.params[name], b.model.mlp.params[name]
            )

    def test_rectified_flow_trains(self):
        cfg = TrainConfig(objective="rectified_flow", steps=600, batch=64,
                          hidden=(32, 32), lr=2e-3, sigma_data=1.0,
                          log_every=25, seed=6)
        result = train_loop(cfg, self._data())
        losses = [v for _, v in result.loss_curve]
        assert np.isfinite(losses).all()
        assert np.mean(losses[-4:]) < np.mean(losses[:4])

    def test_divergence_raises_with_step(self):
        cfg = TrainConfig(steps=200, batch=16, hidden=(16,), lr=1e6, seed=0)
        with pytest.raises(NumericalDivergenceError):
            train_loop(cfg, self._data())

    def test_ema_close_to_raw_at_convergence(self):
        result = train_loop(self.CFG, self._data())
        data = self._data()
        rng = np.random.default_rng(77)
        from scoreflow.oracle import gmm_sample
        x0 = gmm_sample(data, rng, 512)
        raw_loss = compute_loss("edm_denoise", result.model.mlp, x0,
                                self.CFG.train_noise, self.CFG.weighting,
                                np.random.default_rng(1), self.CFG.sigma_data)
        ema_loss = compute_loss("edm_denoise", result.ema_model.mlp, x0,
                                self.CFG.train_noise, self.CFG.weighting,
                                np.random.default_rng(1), self.CFG.sigma_data)
        assert ema_loss <= 1.1 * raw_loss

    def test_reference_preset_values(self):
        cfg = reference_training_config(steps=10)
        assert cfg.lr == 5e-4
        assert cfg.weight_decay == 0.01
        assert cfg.ema_beta == 0.9999


class TestSerialization:
    def test_round_trip_exact(self):
        cfg = TrainConfig(steps=40, batch=16, hidden=(8, 8), seed=2,
                          conditioning="adaln", cfg_dropout=0.1)
        data = make_gmm([(0.5, [1.0, 0.0], 0.3), (0.5, [-1.0, 0.0], 0.3)])
        result = train_loop(cfg, data)
        text = dump_model(result.model)
        back = parse_model(text)
        assert back.objective == result.model.objective
        assert back.sigma_data == result.model.sigma_data
        for name, p in result.model.mlp.params.items():
            np.testing.assert_array_equal(back.mlp.params[name], p)
        x = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_array_equal(
            back.denoise(x, 0.5, label=1), result.model.denoise(x, 0.5, label=1)
        )

    def test_schema_version_checked(self):
        cfg = TrainConfig(steps=5, batch=8, hidden=(8,))
        data = make_gmm([(1.0, [0.0, 0.0], 1.0)])
        text = dump_model(train_loop(cfg, data).model)
        with pytest.raises(DomainError):
            parse_model(text.replace('"schema_version": 1', '"schema_version": 99'))


class TestTrainedDenoiserConversions:
    def test_each_objective_produces_denoiser_scale(self):
        # an untrained model is a poor denoiser but must return finite,
        # correctly-shaped outputs through every conversion path
        data = make_gmm([(1.0, [0.0, 0.0], 1.0)])
        for objective in ("edm_denoise", "epsilon", "v_pred", "rectified_flow"):
            cfg = TrainConfig(objective=objective, steps=5, batch=8,
                              hidden=(8,), sigma_data=1.0)
            model = train_loop(cfg, data).model
            out = model.denoise(np.ones((3, 2)), 0.7)
            assert out.shape == (3, 2)
            assert np.all(np.isfinite(out))

    def test_sigma_zero_rejected(self):
        data = make_gmm([(1.0, [0.0], 1.0)])
        model = train_loop(TrainConfig(steps=2, batch=4, hidden=(4,)), data).model
        with pytest.raises(DomainError):
            model.denoise(np.zeros((1, 1)), 0.0)
