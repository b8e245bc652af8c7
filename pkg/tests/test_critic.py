import math

import numpy as np
import pytest

from teleguard.critic import (
    CriticConfig,
    CriticModel,
    bellman_loss_and_grads,
    calibrate,
    cql_penalty,
    critic_loss_and_grads,
    failure_head_loss,
    init_critic,
    td_target,
    train_critic,
)
from teleguard.data import TransitionBatch, TransitionDataset, sample_batch
from teleguard.nn import forward, params_hash

from oracles import finite_diff_grads, max_relative_error, tabular_q_fixed_point
from tabular import (
    cyclic_success_dataset,
    dataset_rows_for_oracle,
    fitted_vs_oracle_errors,
    mixed_outcome_dataset,
    one_hot,
)


def small_model(obs_dim=3, act_dim=1, hidden=(16, 16), seed=0, gamma=0.9):
    cfg = CriticConfig(hidden=hidden, seed=seed, gamma=gamma)
    return init_critic(obs_dim, act_dim, 0.25, cfg, np.random.default_rng(seed))


def zero_model(bias=0.0, **kw):
    model = small_model(**kw)
    for p in model.parameters():
        p[...] = 0.0
    model.q_head.biases[0][0] = bias
    model.sync_target()
    return model


def toy_batch(B=8, obs_dim=3, act_dim=1, seed=0, terminal_frac=0.25):
    rng = np.random.default_rng(seed)
    term = rng.random(B) < terminal_frac
    return TransitionBatch(
        s=rng.normal(size=(B, obs_dim)),
        a=rng.uniform(-0.25, 0.25, size=(B, act_dim)),
        r=np.where(rng.random(B) < 0.5, 1.0, -1.0),
        s2=rng.normal(size=(B, obs_dim)),
        a2=rng.uniform(-0.25, 0.25, size=(B, act_dim)),
        y_fail=(rng.random(B) < 0.3).astype(float),
        terminal=term,
    )


class TestTdTarget:
    def test_terminal_failure_row_targets_minus_one(self):
        model = small_model()
        batch = TransitionBatch(
            s=np.zeros((1, 3)),
            a=np.zeros((1, 1)),
            r=np.array([-1.0]),
            s2=np.zeros((1, 3)),
            a2=np.zeros((1, 1)),
            y_fail=np.array([1.0]),
            terminal=np.array([True]),
        )
        assert td_target(model, batch)[0] == -1.0

    def test_zero_discount_reduces_to_reward(self):
        model = small_model()
        model.gamma = 0.0
        batch = toy_batch(terminal_frac=0.0)
        assert np.array_equal(td_target(model, batch), batch.r)

    def test_nonterminal_uses_target_net_and_data_next_action(self):
        model = small_model()
        batch = toy_batch(terminal_frac=0.0)
        q_next = model.q_value(batch.s2, batch.a2, target=True)
        assert np.allclose(td_target(model, batch), batch.r + model.gamma * q_next)


class TestCqlPenalty:
    def test_action_constant_critic_has_zero_penalty(self):
        model = zero_model(bias=0.7)
        batch = toy_batch()
        pen, _ = cql_penalty(model, batch, 10, rng=np.random.default_rng(0))
        assert abs(pen) < 1e-12

    def test_exhaustive_grid_matches_enumeration_oracle(self):
        # inject the full discretized action set as the sample set; the
        # estimate must equal independent log-mean-exp enumeration
        model = small_model(seed=3)
        rng = np.random.default_rng(1)
        B, K = 4, 41
        batch = toy_batch(B=B, seed=2)
        grid = np.linspace(-0.25, 0.25, K)
        ood = np.broadcast_to(grid[None, :, None], (B, K, 1)).copy()
        pen, _ = cql_penalty(model, batch, K, ood_actions=ood)
        expected_rows = []
        for i in range(B):
            actions = [float(batch.a[i, 0])] + list(grid)
            qs = []
            for a in actions:
                x = np.concatenate([batch.s[i], [a]])[None, :]
                feats, _ = forward(model.trunk, x)
                q, _ = forward(model.q_head, feats)
                qs.append(float(q[0, 0]))
            mean_exp = sum(math.exp(q) for q in qs) / len(qs)
            expected_rows.append(math.log(mean_exp) - qs[0])
        assert abs(pen - np.mean(expected_rows)) < 1e-3

    def test_monte_carlo_converges_to_continuous_enumeration(self):
        model = small_model(seed=5, hidden=(16,))
        batch = toy_batch(B=2, seed=7)
        pen, _ = cql_penalty(model, batch, 400_000, rng=np.random.default_rng(11))
        # continuous-box oracle by dense trapezoid quadrature per row
        grid = np.linspace(-0.25, 0.25, 20_001)
        rows = []
        for i in range(batch.size):
            x = np.concatenate(
                [np.repeat(batch.s[i][None, :], grid.size, axis=0), grid[:, None]],
                axis=1,
            )
            q = model.q_value(x[:, :3], x[:, 3:])
            mean_exp = np.trapezoid(np.exp(q), grid) / 0.5
            q_data = model.q_value(batch.s[i][None, :], batch.a[i][None, :])[0]
            rows.append(math.log(mean_exp) - q_data)
        # the data action contributes 1/(M+1) weight; negligible at this M
        assert abs(pen - np.mean(rows)) < 1e-3

    def test_gradients_match_finite_differences(self):
        model = small_model(hidden=(8, 8), seed=9)
        batch = toy_batch(B=5, seed=4)
        ood = np.random.default_rng(3).uniform(-0.25, 0.25, size=(5, 6, 1))
        pen, grads = cql_penalty(model, batch, 6, ood_actions=ood)
        numeric = finite_diff_grads(
            lambda: cql_penalty(model, batch, 6, ood_actions=ood)[0],
            model.parameters(),
        )
        assert max_relative_error(grads, numeric) <= 1e-4


class TestFailureHead:
    def test_uninformative_predictor_loss_is_ln2(self):
        model = zero_model()
        batch = toy_batch()
        loss, _ = failure_head_loss(model, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_correct_logits_drive_loss_to_zero(self):
        model = zero_model()
        model.fail_head.biases[0][0] = 40.0
        batch = toy_batch()
        batch = TransitionBatch(
            s=batch.s, a=batch.a, r=batch.r, s2=batch.s2, a2=batch.a2,
            y_fail=np.ones(batch.size), terminal=batch.terminal,
        )
        loss, _ = failure_head_loss(model, batch)
        assert loss < 1e-12

    def test_four_row_hand_computation(self):
        model = small_model(seed=13)
        batch = toy_batch(B=4, seed=6)
        z = model.fail_logit(batch.s, batch.a)
        expected = 0.0
        for zi, yi in zip(z, batch.y_fail):
            p = 1.0 / (1.0 + math.exp(-zi))
            expected += -(yi * math.log(p) + (1.0 - yi) * math.log(1.0 - p))
        expected /= 4.0
        loss, _ = failure_head_loss(model, batch)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        model = small_model(hidden=(8, 8), seed=21)
        batch = toy_batch(B=6, seed=8)
        _, grads = failure_head_loss(model, batch)
        numeric = finite_diff_grads(
            lambda: failure_head_loss(model, batch)[0], model.parameters()
        )
        assert max_relative_error(grads, numeric) <= 1e-4


class TestCombinedGradients:
    def test_fused_step_equals_sum_of_standalone_losses(self):
        cfg = CriticConfig(hidden=(16, 16), alpha=3.0, lambda_fail=0.5, seed=2)
        model = init_critic(3, 1, 0.25, cfg, np.random.default_rng(2))
        batch = toy_batch(B=16, seed=5)
        ood = np.random.default_rng(6).uniform(
            -0.25, 0.25, size=(16, cfg.num_ood_samples, 1)
        )
        total, grads, parts = critic_loss_and_grads(model, batch, cfg, ood)
        bell, g_bell = bellman_loss_and_grads(model, batch)
        pen, g_pen = cql_penalty(model, batch, cfg.num_ood_samples, ood_actions=ood)
        fail, g_fail = failure_head_loss(model, batch)
        assert parts["bellman"] == pytest.approx(bell, rel=1e-12)
        assert parts["cql_penalty"] == pytest.approx(pen, rel=1e-12)
        assert parts["fail_bce"] == pytest.approx(fail, rel=1e-12)
        combined = [
            gb + cfg.alpha * gp + cfg.lambda_fail * gf
            for gb, gp, gf in zip(g_bell, g_pen, g_fail)
        ]
        assert max_relative_error(grads, combined) <= 1e-11

    def test_full_critic_loss_gradcheck(self):
        cfg = CriticConfig(hidden=(8, 8), alpha=2.5, lambda_fail=0.7, seed=0)
        model = init_critic(5, 2, 0.25, cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        batch = TransitionBatch(
            s=rng.normal(size=(6, 5)),
            a=rng.uniform(-0.25, 0.25, size=(6, 2)),
            r=np.where(rng.random(6) < 0.5, 1.0, -1.0),
            s2=rng.normal(size=(6, 5)),
            a2=rng.uniform(-0.25, 0.25, size=(6, 2)),
            y_fail=(rng.random(6) < 0.5).astype(float),
            terminal=rng.random(6) < 0.3,
        )
        ood = rng.uniform(-0.25, 0.25, size=(6, cfg.num_ood_samples, 2))
        _, grads, _ = critic_loss_and_grads(model, batch, cfg, ood)
        numeric = finite_diff_grads(
            lambda: critic_loss_and_grads(model, batch, cfg, ood)[0],
            model.parameters(),
        )
        assert max_relative_error(grads, numeric) <= 1e-4


class TestTrainCritic:
    def tabular_config(self, **kw):
        base = dict(
            gamma=0.9,
            alpha=0.0,
            lambda_fail=0.0,
            hidden=(32, 32),
            learning_rate=5e-4,
            batch_size=64,
            steps=8000,
            target_period=100,
            seed=0,
        )
        base.update(kw)
        return CriticConfig(**base)

    def test_all_success_chain_matches_geometric_series(self):
        ds = cyclic_success_dataset()
        with pytest.warns(UserWarning, match="single outcome class"):
            model = train_critic(ds, self.tabular_config())
        oracle = tabular_q_fixed_point(dataset_rows_for_oracle(ds), gamma=0.9)
        target = 1.0 / (1.0 - 0.9)
        for (s, a), q_star in oracle.items():
            assert q_star == pytest.approx(target, abs=1e-9)
        errors = fitted_vs_oracle_errors(model, ds, oracle)
        assert max(errors.values()) <= 1e-2, errors

    def test_mixed_chain_matches_dp_oracle(self):
        ds = mixed_outcome_dataset()
        model = train_critic(ds, self.tabular_config())
        oracle = tabular_q_fixed_point(dataset_rows_for_oracle(ds), gamma=0.9)
        errors = fitted_vs_oracle_errors(model, ds, oracle)
        assert max(errors.values()) <= 1e-2, errors

    def test_alpha_sweep_monotonically_suppresses_ood_actions(self):
        ds = mixed_outcome_dataset()
        rng = np.random.default_rng(0)
        gaps = []
        for alpha in (0.0, 1.0, 5.0):
            model = train_critic(ds, self.tabular_config(alpha=alpha, steps=1500))
            uniform = rng.uniform(-0.25, 0.25, size=(len(ds), 8))
            q_data = model.q_value(ds.s, ds.a).mean()
            q_ood = np.mean(
                [model.q_value(ds.s, uniform[:, j : j + 1]) for j in range(8)]
            )
            gaps.append(q_data - q_ood)
        assert gaps[0] < gaps[1] < gaps[2], gaps

    def test_single_class_dataset_warns_and_completes(self):
        ds = cyclic_success_dataset(cycles=5)
        with pytest.warns(UserWarning, match="single outcome class"):
            model = train_critic(ds, self.tabular_config(steps=50))
        assert model.calibrated

    def test_training_is_bit_deterministic(self, tmp_path):
        ds = mixed_outcome_dataset(cycles=5)
        cfg = self.tabular_config(steps=120)
        a, b = train_critic(ds, cfg), train_critic(ds, cfg)
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_non_finite_loss_aborts_with_diagnostics(self):
        ds = mixed_outcome_dataset(cycles=3)
        ds.s[0, 0] = np.inf
        with pytest.raises((RuntimeError, ValueError)):
            train_critic(ds, self.tabular_config(steps=2000))


class TestScore:
    def calibrated_model(self):
        model = small_model()
        model.q_min, model.q_max, model.tau = -2.0, 6.0, 1.0
        return model

    def test_normalize_endpoints_clip_and_midpoint(self):
        model = self.calibrated_model()
        q = np.array([-2.0, 6.0, 16.0, -12.0, 2.0])
        expected = np.array([0.0, 1.0, 1.0, 0.0, 0.5])
        assert np.allclose(model.normalize(q), expected)

    def test_score_shapes_and_ranges(self):
        model = self.calibrated_model()
        s = np.random.default_rng(0).normal(size=(10, 3))
        a = np.random.default_rng(1).uniform(-0.25, 0.25, size=(10, 1))
        q_raw, q_tilde, p = model.score(s, a)
        assert q_raw.shape == (10,)
        assert np.all((q_tilde >= 0) & (q_tilde <= 1))
        assert np.all((p > 0) & (p < 1))

    def test_uncalibrated_model_rejected(self):
        model = small_model()
        with pytest.raises(RuntimeError, match="calibrated"):
            model.score(np.zeros((1, 3)), np.zeros((1, 1)))
        with pytest.raises(RuntimeError, match="calibrated"):
            model.feasible(np.zeros((1, 3)), np.zeros((1, 1)))

    def test_calibration_percentiles_and_tau_window(self):
        ds = mixed_outcome_dataset(cycles=5)
        model = small_model()
        calibrate(model, ds)
        assert model.q_min < model.q_max
        assert model.q_min <= model.tau <= model.q_max

    def test_checkpoint_round_trip_preserves_scores(self, tmp_path):
        ds = mixed_outcome_dataset(cycles=3)
        model = train_critic(ds, CriticConfig(hidden=(16,), steps=60, seed=1))
        path = tmp_path / "critic.ckpt"
        model.save(path)
        restored = CriticModel.load(path)
        assert params_hash(model.parameters()) == params_hash(restored.parameters())
        s, a = ds.s[:5], ds.a[:5]
        for x, y in zip(model.score(s, a), restored.score(s, a)):
            assert np.array_equal(x, y)
        assert restored.gamma == model.gamma and restored.tau == model.tau
