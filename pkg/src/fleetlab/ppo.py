"""Clipped policy-gradient training with elapsed-time advantage estimation.

Rollouts run on one or more persistent environments; episodes continue
across epoch boundaries and the value head bootstraps at the cut. The actor
and the critic are updated by separate optimizers over disjoint parameter
slices, with the value loss stopped at the shared trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .engine import Engine, EpisodeEnd, Scenario
from .features import N_REPO_ACTIONS, Observation
from .policy import (
    PolicyNet,
    backward_batch,
    build_policy,
    critic_offset,
    forward,
    forward_batch,
    grads_like,
    pack_observations,
    sample_categorical,
)
from .transitions import TrainerConfig
from .util import segment_bounds, segment_log_softmax, segment_sum


class PPOAbort(RuntimeError):
    """Raised when an update pass produces non-finite probability ratios."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def gae(rewards, values, dts, gamma: float, lam: float, boot_value: float = 0.0) -> np.ndarray:
    """Advantages for one uninterrupted trajectory segment.

    Discount exponents are the elapsed times between decisions, not step
    counts; boot_value is the value of the state after the last step (zero
    when that step ended the episode).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dts = np.asarray(dts, dtype=np.float64)
    adv = np.empty(len(rewards))
    carry = 0.0
    v_next = boot_value
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma ** dts[t] * v_next - values[t]
        carry = delta + (gamma * lam) ** dts[t] * carry
        adv[t] = carry
        v_next = values[t]
    return adv


def entropy_coef_at(epoch: int, start: float, final: float, anneal_epochs: int) -> float:
    """Linear schedule from start to final over the first anneal_epochs."""
    if anneal_epochs <= 0:
        return start
    frac = min(epoch / anneal_epochs, 1.0)
    return start + (final - start) * frac


@dataclass
class Rollout:
    obs: list[Observation]
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray  # normalized per rollout
    value_targets: np.ndarray
    completed_returns: list[float] = field(default_factory=list)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ---------------------------------------------------------------------------
# the update
# ---------------------------------------------------------------------------


class _CatIndex:
    """Index arrays that lay a pack's ragged score sets into one flat vector."""

    def __init__(self, pack, actions: np.ndarray):
        sizes = np.zeros(pack.n, dtype=np.int64)
        if len(pack.assign_samples):
            sizes[pack.assign_samples] = np.diff(pack.assign_bounds)
        sizes[pack.repo_samples] = N_REPO_ACTIONS
        self.bounds = segment_bounds(sizes)
        self.total = int(self.bounds[-1])
        a_sizes = np.diff(pack.assign_bounds)
        within = np.arange(len(pack.assign_rows)) - np.repeat(pack.assign_bounds[:-1], a_sizes)
        self.assign_pos = np.repeat(self.bounds[pack.assign_samples], a_sizes) + within
        self.repo_pos = (self.bounds[pack.repo_samples][:, None]
                         + np.arange(N_REPO_ACTIONS)).ravel()
        self.taken = self.bounds[:-1] + actions
        self.sizes = sizes

    def scatter(self, out) -> np.ndarray:
        cat = np.empty(self.total, dtype=np.float64)
        cat[self.assign_pos] = out.assign_scores
        cat[self.repo_pos] = out.repo_scores.ravel()
        return cat

    def gather_grads(self, d_cat: np.ndarray, pack):
        d_assign = d_cat[self.assign_pos]
        d_repo = d_cat[self.repo_pos].reshape(-1, N_REPO_ACTIONS)
        return d_assign, d_repo


def action_log_probs(net: PolicyNet, pack, actions: np.ndarray) -> np.ndarray:
    """Log probability of each taken action under the current parameters."""
    out = forward_batch(net, pack)
    idx = _CatIndex(pack, actions)
    return segment_log_softmax(idx.scatter(out), idx.bounds)[idx.taken]


def ppo_loss_and_grads(net: PolicyNet, rollout: Rollout, clip: float,
                       entropy_coef: float, grads, pack=None, idx=None,
                       update_pass: int = 0):
    """One full-batch evaluation of the clipped objective and its gradient.

    Fills grads (zeroed first) with the gradient of
        -mean(min(ratio*A, clip(ratio)*A)) - entropy_coef*mean(entropy)
    over the actor parameters plus the value regression gradient over the
    critic parameters; the value loss does not reach the shared trunk.
    Returns (policy loss, value loss, entropy).
    """
    if pack is None:
        pack = pack_observations(rollout.obs, dtype=net.dtype)
    if idx is None:
        idx = _CatIndex(pack, rollout.actions)
    n = pack.n
    adv = rollout.advantages

    out = forward_batch(net, pack, need_value=True, need_cache=True)
    cat = idx.scatter(out)
    logp = segment_log_softmax(cat, idx.bounds)
    lp_taken = logp[idx.taken]
    ratio = np.exp(lp_taken - rollout.old_logp)
    if not np.all(np.isfinite(ratio)):
        bad = np.flatnonzero(~np.isfinite(ratio))
        raise PPOAbort(
            f"non-finite probability ratio on update pass {update_pass}",
            {"pass": update_pass, "bad_samples": bad[:16].tolist(),
             "max_logp_gap": float(np.nanmax(np.abs(lp_taken - rollout.old_logp))),
             "max_score": float(np.max(np.abs(cat)))},
        )

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    objective = np.minimum(unclipped, clipped)
    policy_loss = -float(objective.mean())

    p = np.exp(logp)
    ent = -segment_sum(p * logp, idx.bounds)
    entropy = float(ent.mean())

    # gradient flows only where the unclipped term is the active minimum
    g = -(ratio * adv * (unclipped <= clipped)) / n
    d_cat = -p * np.repeat(g, idx.sizes)
    d_cat[idx.taken] += g
    d_cat += (entropy_coef / n) * p * (logp + np.repeat(ent, idx.sizes))

    v_err = out.values - rollout.value_targets
    value_loss = float(np.mean(v_err**2))
    dv = (2.0 / n) * v_err

    d_assign, d_repo = idx.gather_grads(d_cat, pack)
    grads.zero()
    backward_batch(net, out.cache, grads, d_assign=d_assign, d_repo=d_repo,
                   d_values=dv, detach_values=True)
    return policy_loss, value_loss, entropy


def ppo_update(net: PolicyNet, rollout: Rollout, opt_policy: nn.Adam, opt_value: nn.Adam,
               clip: float, entropy_coef: float, updates: int):
    """Run the full-batch update passes for one epoch's rollout.

    Returns (policy loss, value loss, entropy) from the final pass. Raises
    PPOAbort if any pass produces a non-finite probability ratio.
    """
    pack = pack_observations(rollout.obs, dtype=net.dtype)
    idx = _CatIndex(pack, rollout.actions)
    split = critic_offset(net)
    grads = grads_like(net)
    stats = (np.nan, np.nan, np.nan)
    for u in range(updates):
        stats = ppo_loss_and_grads(net, rollout, clip, entropy_coef, grads,
                                   pack=pack, idx=idx, update_pass=u)
        opt_policy.step(net.flat[:split], grads.flat[:split])
        opt_value.step(net.flat[split:], grads.flat[split:])
    return stats


# ---------------------------------------------------------------------------
# rollout collection and the epoch loop
# ---------------------------------------------------------------------------


class _EnvSlot:
    def __init__(self, slot: int):
        self.slot = slot
        self.engine = Engine()
        self.obs = None
        self.episodes_started = 0
        self.ep_return = 0.0


class PPOTrainer:
    """Epoch-at-a-time clipped policy gradient on persistent environments."""

    def __init__(self, scenario: Scenario, cfg: TrainerConfig, seed: int,
                 dtype=np.float64):
        self.scenario = scenario
        self.cfg = cfg
        self.seed = int(seed)
        self.net = build_policy(np.random.default_rng([self.seed, 0]),
                                with_critic=True, dtype=dtype)
        split = critic_offset(self.net)
        self.opt_policy = nn.Adam(split, cfg.lr_policy, dtype=dtype)
        self.opt_value = nn.Adam(self.net.layout.size - split, cfg.lr_value, dtype=dtype)
        self.envs = [_EnvSlot(i) for i in range(cfg.parallel_envs)]
        self.epoch_idx = 0

    def _env_seed(self, slot: _EnvSlot) -> int:
        gen = np.random.default_rng([self.seed, 2, slot.slot, slot.episodes_started])
        return int(gen.integers(2**31))

    def _reset_slot(self, slot: _EnvSlot) -> None:
        slot.obs = slot.engine.reset(self.scenario, seed=self._env_seed(slot))
        slot.episodes_started += 1
        slot.ep_return = 0.0

    def _collect(self) -> Rollout:
        cfg = self.cfg
        per_env = max(cfg.steps_per_epoch // cfg.parallel_envs, 1)
        all_obs: list[Observation] = []
        actions: list[int] = []
        old_logp: list[float] = []
        adv_parts: list[np.ndarray] = []
        target_parts: list[np.ndarray] = []
        completed: list[float] = []

        for slot in self.envs:
            rng = np.random.default_rng([self.seed, 3, self.epoch_idx, slot.slot])
            if slot.obs is None:
                self._reset_slot(slot)
            rewards, values, dts, dones = [], [], [], []
            seg_start = 0
            for _ in range(per_env):
                obs = slot.obs
                out = forward(self.net, obs, need_value=True)
                a, lp = sample_categorical(out.scores, rng)
                reward, nxt, elapsed = slot.engine.step(slot.engine.action_from_index(obs, a))
                done = isinstance(nxt, EpisodeEnd)
                all_obs.append(obs)
                actions.append(a)
                old_logp.append(lp)
                rewards.append(reward)
                values.append(out.value)
                dts.append(elapsed)
                dones.append(done)
                slot.ep_return += reward
                if done:
                    completed.append(slot.ep_return)
                    self._reset_slot(slot)
                else:
                    slot.obs = nxt

            # advantages per uninterrupted segment; bootstrap at the cut
            t = 0
            while t < per_env:
                end = t
                while end < per_env and not dones[end]:
                    end += 1
                terminal = end < per_env
                stop = end + 1 if terminal else end
                boot = 0.0 if terminal else forward(self.net, slot.obs, need_value=True).value
                seg_adv = gae(rewards[t:stop], values[t:stop], dts[t:stop],
                              cfg.gamma, cfg.gae_lambda, boot_value=boot)
                adv_parts.append(seg_adv)
                target_parts.append(seg_adv + np.asarray(values[t:stop]))
                t = stop

        adv = np.concatenate(adv_parts)
        return Rollout(
            obs=all_obs,
            actions=np.asarray(actions, dtype=np.int64),
            old_logp=np.asarray(old_logp, dtype=np.float64),
            advantages=normalize_advantages(adv),
            value_targets=np.concatenate(target_parts),
            completed_returns=completed,
        )

    def run_epoch(self) -> dict:
        cfg = self.cfg
        coef = entropy_coef_at(self.epoch_idx, cfg.entropy_start, cfg.entropy_final,
                               cfg.entropy_anneal_epochs)
        rollout = self._collect()
        policy_loss, value_loss, entropy = ppo_update(
            self.net, rollout, self.opt_policy, self.opt_value,
            cfg.clip, coef, cfg.updates_per_epoch)
        self.epoch_idx += 1
        return {
            "epoch": self.epoch_idx,
            "policy_loss": policy_loss,
            "value_loss": value_loss,
            "entropy": entropy,
            "entropy_coef": coef,
            "completed_returns": rollout.completed_returns,
        }

    # -- checkpoint state (environments restart on resume) --

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "adam_policy_m": self.opt_policy.m.copy(),
            "adam_policy_v": self.opt_policy.v.copy(),
            "adam_value_m": self.opt_value.m.copy(),
            "adam_value_v": self.opt_value.v.copy(),
            "counters": np.array([self.epoch_idx, self.opt_policy.t, self.opt_value.t],
                                 dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.opt_policy.m[:] = arrays["adam_policy_m"]
        self.opt_policy.v[:] = arrays["adam_policy_v"]
        self.opt_value.m[:] = arrays["adam_value_m"]
        self.opt_value.v[:] = arrays["adam_value_v"]
        ep, tp, tv = (int(x) for x in arrays["counters"])
        self.epoch_idx, self.opt_policy.t, self.opt_value.t = ep, tp, tv
