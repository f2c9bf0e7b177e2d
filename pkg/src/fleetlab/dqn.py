"""Value learning on decision transitions: replay, frozen targets, and
elapsed-time n-step backups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .engine import Engine, Scenario
from .features import Observation
from .policy import (
    PolicyNet,
    build_policy,
    backward_batch,
    forward,
    forward_batch,
    grads_like,
    pack_observations,
    select_epsilon,
)
from .transitions import (
    DRIVER_CENTRIC,
    EpisodeLog,
    TrainerConfig,
    Transition,
    build_driver_centric,
    build_system_centric,
    discount,
    rollout_episode,
)
from .util import segment_max


def epsilon_at(episode: int, start: float = 0.99, step: float = 0.01,
               floor: float = 0.1) -> float:
    """Exploration rate after a given number of completed episodes."""
    return max(start - step * episode, floor)


class ReplayBuffer:
    """Fixed-capacity ring with uniform sampling; oldest items evicted first."""

    def __init__(self, capacity: int = 20000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list = []
        self._head = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, item) -> None:
        if len(self._data) < self.capacity:
            self._data.append(item)
        else:
            self._data[self._head] = item
            self._head = (self._head + 1) % self.capacity

    def sample(self, rng: np.random.Generator, k: int) -> list:
        if k > len(self._data):
            raise ValueError("not enough items to sample")
        idx = rng.choice(len(self._data), size=k, replace=False)
        return [self._data[i] for i in idx]

    def items(self) -> list:
        return list(self._data)


# ---------------------------------------------------------------------------
# n-step targets
# ---------------------------------------------------------------------------


def nstep_target(window: list[Transition], target_net: PolicyNet, gamma: float) -> float:
    """Backup value for the first transition of a window.

    Rewards are discounted by elapsed time from the window's first decision;
    the bootstrap term is dropped when the window reaches a terminal
    transition.
    """
    t = 0.0
    total = 0.0
    for tr in window:
        total += discount(gamma, t) * tr.reward
        t += tr.dt
        if tr.done:
            return total
    tail = window[-1].next_obs
    q = float(np.max(forward(target_net, tail).scores))
    return total + discount(gamma, t) * q


@dataclass(frozen=True)
class NStepItem:
    """A replay entry with everything parameter-independent precomputed."""

    obs: Observation
    action: int
    reward_sum: float
    boot_obs: Optional[Observation]  # None when the window hit a terminal
    boot_disc: float


def build_nstep_items(stream: list[Transition], n: int, gamma: float) -> list[NStepItem]:
    """One replay item per transition, each looking up to n steps ahead."""
    items = []
    for i, first in enumerate(stream):
        t = 0.0
        total = 0.0
        boot = None
        disc = 0.0
        for tr in stream[i : i + n]:
            total += discount(gamma, t) * tr.reward
            t += tr.dt
            if tr.done:
                boot = None
                disc = 0.0
                break
            boot = tr.next_obs
            disc = discount(gamma, t)
        items.append(NStepItem(first.obs, first.action, total, boot, disc))
    return items


# ---------------------------------------------------------------------------
# batched updates
# ---------------------------------------------------------------------------


def _q_taken(out, pack, actions: np.ndarray) -> np.ndarray:
    q = np.empty(pack.n, dtype=out.repo_scores.dtype)
    if len(pack.assign_samples):
        pos = pack.assign_bounds[:-1] + actions[pack.assign_samples]
        q[pack.assign_samples] = out.assign_scores[pos]
    if len(pack.repo_samples):
        rows = np.arange(len(pack.repo_samples))
        q[pack.repo_samples] = out.repo_scores[rows, actions[pack.repo_samples]]
    return q


def _q_max(out, pack) -> np.ndarray:
    q = np.empty(pack.n, dtype=out.repo_scores.dtype)
    if len(pack.assign_samples):
        q[pack.assign_samples] = segment_max(out.assign_scores, pack.assign_bounds)
    if len(pack.repo_samples):
        q[pack.repo_samples] = out.repo_scores.max(axis=1)
    return q


def dqn_update(net: PolicyNet, target_net: PolicyNet, batch: list[NStepItem],
               opt: nn.Adam, grads) -> float:
    """One optimizer step of mean squared backup error over a batch."""
    b = len(batch)
    actions = np.array([it.action for it in batch], dtype=np.int64)
    targets = np.array([it.reward_sum for it in batch], dtype=net.dtype)

    boot = [(i, it.boot_obs) for i, it in enumerate(batch) if it.boot_obs is not None]
    if boot:
        bpack = pack_observations([o for _, o in boot], dtype=net.dtype)
        bmax = _q_max(forward_batch(target_net, bpack), bpack)
        for (i, _), q in zip(boot, bmax):
            targets[i] += batch[i].boot_disc * q

    pack = pack_observations([it.obs for it in batch], dtype=net.dtype)
    out = forward_batch(net, pack, need_cache=True)
    err = _q_taken(out, pack, actions) - targets
    loss = float(np.mean(err**2))

    dq = (2.0 / b) * err
    d_assign = np.zeros(len(pack.assign_rows), dtype=net.dtype)
    if len(pack.assign_samples):
        pos = pack.assign_bounds[:-1] + actions[pack.assign_samples]
        d_assign[pos] = dq[pack.assign_samples]
    d_repo = np.zeros((len(pack.repo_samples), out.repo_scores.shape[1]), dtype=net.dtype)
    if len(pack.repo_samples):
        rows = np.arange(len(pack.repo_samples))
        d_repo[rows, actions[pack.repo_samples]] = dq[pack.repo_samples]

    grads.zero()
    backward_batch(net, out.cache, grads, d_assign=d_assign, d_repo=d_repo)
    opt.step(net.flat, grads.flat)
    return loss


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class DQNTrainer:
    """Episode-at-a-time Q-learning against a fixed scenario generator.

    Each episode is collected with the current online net, converted into
    n-step replay items under the chosen perspective, and followed by one
    learner update per collected decision step.
    """

    def __init__(self, scenario: Scenario, cfg: TrainerConfig, perspective: str,
                 seed: int, dtype=np.float64):
        self.scenario = scenario
        self.cfg = cfg
        self.perspective = perspective
        self.seed = int(seed)
        self.net = build_policy(np.random.default_rng([self.seed, 0]), dtype=dtype)
        self.target = self.net.clone()
        self.opt = nn.Adam(self.net.layout.size, cfg.lr_q, dtype=dtype)
        self.grads = grads_like(self.net)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.engine = Engine()
        self.episode = 0
        self.learner_steps = 0

    def _episode_rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, tag, self.episode])

    def run_episode(self) -> EpisodeLog:
        eps = epsilon_at(self.episode, self.cfg.epsilon_start,
                         self.cfg.epsilon_step, self.cfg.epsilon_floor)
        explore = self._episode_rng(1)
        env_seed = int(self._episode_rng(2).integers(2**31))

        def act(obs):
            return select_epsilon(forward(self.net, obs).scores, eps, explore)

        log = rollout_episode(self.engine, self.scenario, env_seed, act)

        if self.perspective == DRIVER_CENTRIC:
            streams = list(build_driver_centric(log).values())
        else:
            streams = [build_system_centric(log)]
        for stream in streams:
            for item in build_nstep_items(stream, self.cfg.n_step, self.cfg.gamma):
                self.replay.push(item)

        self.train_steps(len(log.steps), self._episode_rng(3))
        self.episode += 1
        return log

    def train_steps(self, k: int, sample_rng: np.random.Generator) -> None:
        """Run k learner updates (skipped while the replay is underfilled),
        snapshotting the target net on the configured cadence."""
        for _ in range(k):
            if len(self.replay) < self.cfg.batch_size:
                continue
            batch = self.replay.sample(sample_rng, self.cfg.batch_size)
            dqn_update(self.net, self.target, batch, self.opt, self.grads)
            self.learner_steps += 1
            if self.learner_steps % self.cfg.target_copy_every == 0:
                self.target.copy_from(self.net)

    # -- checkpoint state (replay contents are not persisted) --

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "target_flat": self.target.flat.copy(),
            "adam_m": self.opt.m.copy(),
            "adam_v": self.opt.v.copy(),
            "counters": np.array([self.episode, self.learner_steps, self.opt.t],
                                 dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.target.flat[:] = arrays["target_flat"]
        self.opt.m[:] = arrays["adam_m"]
        self.opt.v[:] = arrays["adam_v"]
        ep, steps, t = (int(x) for x in arrays["counters"])
        self.episode, self.learner_steps, self.opt.t = ep, steps, t
