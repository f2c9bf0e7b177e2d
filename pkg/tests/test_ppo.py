"""Advantage estimation, the clipped objective, and the epoch loop."""

import numpy as np
import pytest
from conftest import random_obs, relu_margin, scripted

from fleetlab import nn
from fleetlab.policy import (
    build_policy,
    critic_offset,
    forward,
    grads_like,
    pack_observations,
)
from fleetlab.ppo import (
    PPOAbort,
    PPOTrainer,
    Rollout,
    action_log_probs,
    entropy_coef_at,
    gae,
    normalize_advantages,
    ppo_loss_and_grads,
    ppo_update,
)
from fleetlab.transitions import TrainerConfig


def gae_oracle(rewards, values, dts, gamma, lam, boot):
    """Direct double-sum evaluation of the advantage definition."""
    T = len(rewards)
    times = np.concatenate([[0.0], np.cumsum(dts)])
    vx = list(values) + [boot]
    deltas = [rewards[k] + gamma ** dts[k] * vx[k + 1] - vx[k] for k in range(T)]
    return np.array([
        sum((gamma * lam) ** (times[k] - times[t]) * deltas[k] for k in range(t, T))
        for t in range(T)
    ])


def make_rollout(rng, net, n, adv=None):
    """A rollout whose stored log-probs come from net itself (ratio == 1)."""
    obs = [random_obs(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
           for _ in range(n)]
    actions = np.array([int(rng.integers(o.n_actions)) for o in obs], dtype=np.int64)
    pack = pack_observations(obs, dtype=net.dtype)
    old_logp = action_log_probs(net, pack, actions)
    if adv is None:
        adv = rng.normal(size=n)
    return Rollout(obs, actions, old_logp, np.asarray(adv, dtype=np.float64),
                   value_targets=rng.normal(size=n))


class TestGAE:
    def test_lambda_zero_is_one_step_delta(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=8)
        v = rng.normal(size=8)
        dts = rng.uniform(0.1, 2.0, size=8)
        boot = 0.4
        adv = gae(r, v, dts, 0.95, 0.0, boot_value=boot)
        vx = np.append(v, boot)
        deltas = r + 0.95**dts * vx[1:] - vx[:-1]
        np.testing.assert_allclose(adv, deltas, rtol=0, atol=1e-12)

    def test_lambda_one_zero_values_gives_discounted_returns(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=10)
        dts = rng.uniform(0.1, 2.0, size=10)
        adv = gae(r, np.zeros(10), dts, 0.9, 1.0, boot_value=0.0)
        times = np.concatenate([[0.0], np.cumsum(dts)])
        want = [sum(0.9 ** (times[k] - times[t]) * r[k] for k in range(t, 10))
                for t in range(10)]
        np.testing.assert_allclose(adv, want, rtol=0, atol=1e-12)

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            T = int(rng.integers(1, 21))
            r = rng.normal(size=T)
            v = rng.normal(size=T)
            dts = rng.uniform(0.05, 3.0, size=T)
            gamma = rng.uniform(0.5, 1.0)
            lam = rng.uniform(0.0, 1.0)
            boot = float(rng.normal())
            got = gae(r, v, dts, gamma, lam, boot_value=boot)
            want = gae_oracle(r, v, dts, gamma, lam, boot)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_normalization(self):
        rng = np.random.default_rng(3)
        adv = normalize_advantages(rng.normal(2.0, 5.0, size=400))
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.std() == pytest.approx(1.0, abs=1e-6)


class TestEntropySchedule:
    def test_constant_without_anneal(self):
        assert entropy_coef_at(0, 0.01, 0.01, 0) == 0.01
        assert entropy_coef_at(5000, 0.01, 0.01, 0) == 0.01

    def test_linear_anneal(self):
        assert entropy_coef_at(0, 0.7, 0.01, 2000) == pytest.approx(0.7)
        assert entropy_coef_at(1000, 0.7, 0.01, 2000) == pytest.approx(0.355)
        assert entropy_coef_at(2000, 0.7, 0.01, 2000) == pytest.approx(0.01)
        assert entropy_coef_at(9000, 0.7, 0.01, 2000) == pytest.approx(0.01)


class TestLogProbs:
    def test_batched_log_probs_match_single_forwards(self):
        rng = np.random.default_rng(4)
        net = build_policy(rng, with_critic=True)
        obs = [random_obs(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
               for _ in range(20)]
        actions = np.array([int(rng.integers(o.n_actions)) for o in obs])
        pack = pack_observations(obs)
        got = action_log_probs(net, pack, actions)
        for i, o in enumerate(obs):
            scores = forward(net, o).scores
            want = nn.log_softmax(scores)[actions[i]]
            assert got[i] == pytest.approx(want, abs=1e-9)


class TestClippedObjective:
    def test_ratio_one_objective_is_mean_advantage(self):
        rng = np.random.default_rng(5)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 12)
        pl, vl, ent = ppo_loss_and_grads(net, rollout, 0.2, 0.0, grads_like(net))
        assert pl == pytest.approx(-rollout.advantages.mean(), abs=1e-12)
        assert vl > 0.0
        assert ent > 0.0

    def test_clip_binds_and_blocks_gradient(self):
        rng = np.random.default_rng(6)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 1, adv=[2.0])
        # shift the stored log-prob so the current ratio is exactly 1.5
        rollout.old_logp = rollout.old_logp - np.log(1.5)
        grads = grads_like(net)
        pl, _, _ = ppo_loss_and_grads(net, rollout, 0.2, 0.0, grads)
        assert pl == pytest.approx(-1.2 * 2.0, rel=1e-9)
        split = critic_offset(net)
        assert np.all(grads.flat[:split] == 0.0)  # clipped branch active
        assert np.any(grads.flat[split:] != 0.0)  # value regression unaffected

    def test_value_loss_reaches_only_the_critic(self):
        rng = np.random.default_rng(7)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 8, adv=np.zeros(8))
        grads = grads_like(net)
        ppo_loss_and_grads(net, rollout, 0.2, 0.0, grads)
        split = critic_offset(net)
        assert np.all(grads.flat[:split] == 0.0)
        assert np.any(grads.flat[split:] != 0.0)

    def test_nonfinite_ratio_aborts_with_diagnostics(self):
        rng = np.random.default_rng(8)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 4)
        rollout.old_logp = rollout.old_logp.copy()
        rollout.old_logp[2] = -np.inf
        with pytest.raises(PPOAbort) as exc:
            ppo_loss_and_grads(net, rollout, 0.2, 0.01, grads_like(net))
        assert exc.value.diagnostics["pass"] == 0
        assert 2 in exc.value.diagnostics["bad_samples"]

    def test_surrogate_gradient_matches_finite_differences(self):
        coef = 0.01
        for attempt in range(8):
            rng = np.random.default_rng(31 + 1000 * attempt)
            net = build_policy(rng, with_critic=True)
            rollout = make_rollout(rng, net, 3)
            margins = []
            for o in rollout.obs:
                out = forward(net, o, need_value=True, need_cache=True)
                margins.append(relu_margin(net, out.cache))
            if min(margins) > 1e-4:
                break
        else:
            pytest.fail("could not sample a kink-free configuration")

        grads = grads_like(net)
        ppo_loss_and_grads(net, rollout, 0.2, coef, grads)
        split = critic_offset(net)
        scratch = grads_like(net)

        def actor_loss():
            pl, _, ent = ppo_loss_and_grads(net, rollout, 0.2, coef, scratch)
            return pl - coef * ent

        def value_loss():
            _, vl, _ = ppo_loss_and_grads(net, rollout, 0.2, coef, scratch)
            return vl

        rng_idx = np.random.default_rng(99)
        actor_idx = sorted(set(rng_idx.integers(split, size=60).tolist()))
        fd_actor = nn.fd_gradient(actor_loss, net.flat, indices=actor_idx)
        scale = np.maximum(np.maximum(np.abs(fd_actor), np.abs(grads.flat[actor_idx])), 1.0)
        assert np.max(np.abs(fd_actor - grads.flat[actor_idx]) / scale) < 1e-4

        critic_idx = sorted(set((split + rng_idx.integers(net.layout.size - split,
                                                          size=30)).tolist()))
        fd_value = nn.fd_gradient(value_loss, net.flat, indices=critic_idx)
        scale = np.maximum(np.maximum(np.abs(fd_value), np.abs(grads.flat[critic_idx])), 1.0)
        assert np.max(np.abs(fd_value - grads.flat[critic_idx]) / scale) < 1e-4

    def test_infinite_clip_single_pass_is_vanilla_policy_gradient(self):
        rng = np.random.default_rng(9)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 10)
        grads = grads_like(net)
        ppo_loss_and_grads(net, rollout, np.inf, 0.0, grads)

        # reference: grad of -mean(logp(a|s) * A) via per-sample backward passes
        ref = grads_like(net)
        n = len(rollout.obs)
        for i, o in enumerate(rollout.obs):
            out = forward(net, o, need_value=True, need_cache=True)
            p = np.exp(nn.log_softmax(out.scores))
            g = -rollout.advantages[i] / n
            d_scores = -g * p
            d_scores[rollout.actions[i]] += g
            from fleetlab.policy import backward
            backward(net, out.cache, d_scores, ref, d_value=0.0)

        split = critic_offset(net)
        np.testing.assert_allclose(grads.flat[:split], ref.flat[:split],
                                   rtol=1e-9, atol=1e-12)


class TestPPOTrainer:
    def _scenario(self):
        return scripted(
            orders=[(0.0, (0.4, 0.5), (0.6, 0.5), 1.0),
                    (1.0, (0.5, 0.4), (0.5, 0.7), 2.0),
                    (3.0, (0.6, 0.6), (0.3, 0.3), 1.5)],
            drivers=[(0.0, (0.45, 0.5)), (0.0, (0.55, 0.5))],
            horizon=15.0,
        )

    def _cfg(self, **kw):
        kw.setdefault("steps_per_epoch", 90)
        kw.setdefault("parallel_envs", 2)
        kw.setdefault("updates_per_epoch", 3)
        return TrainerConfig(**kw)

    def test_epochs_run_and_report(self):
        trainer = PPOTrainer(self._scenario(), self._cfg(), seed=0)
        s1 = trainer.run_epoch()
        s2 = trainer.run_epoch()
        assert s1["epoch"] == 1 and s2["epoch"] == 2
        for s in (s1, s2):
            assert np.isfinite(s["policy_loss"])
            assert np.isfinite(s["value_loss"])
            assert s["entropy"] > 0.0
        assert len(s1["completed_returns"]) > 0
        assert np.all(np.isfinite(trainer.net.flat))

    def test_identical_seeds_reproduce(self):
        a = PPOTrainer(self._scenario(), self._cfg(), seed=4)
        b = PPOTrainer(self._scenario(), self._cfg(), seed=4)
        ra = a.run_epoch()
        rb = b.run_epoch()
        assert ra["policy_loss"] == rb["policy_loss"]
        np.testing.assert_array_equal(a.net.flat, b.net.flat)

    def test_update_runs_requested_passes(self):
        rng = np.random.default_rng(10)
        net = build_policy(rng, with_critic=True)
        rollout = make_rollout(rng, net, 6)
        split = critic_offset(net)
        opt_p = nn.Adam(split, 1e-3)
        opt_v = nn.Adam(net.layout.size - split, 1e-3)
        before = net.flat.copy()
        stats = ppo_update(net, rollout, opt_p, opt_v, clip=0.2,
                           entropy_coef=0.01, updates=4)
        assert opt_p.t == 4 and opt_v.t == 4
        assert np.any(net.flat != before)
        assert all(np.isfinite(x) for x in stats)
