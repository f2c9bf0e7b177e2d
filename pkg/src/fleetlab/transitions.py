"""Decision logs and their conversion into training transitions.

An episode is recorded as a flat sequence of decision steps. Two readings of
that log exist: the system view chains globally consecutive decisions, while
the driver view chains each driver's own successive decisions (skipping over
everything other drivers did in between). Both carry real-valued time gaps
so targets can discount by elapsed simulated time rather than step count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine import Engine, EpisodeEnd, Scenario
from .features import Observation

DRIVER_CENTRIC = "driver"
SYSTEM_CENTRIC = "system"
PERSPECTIVES = (DRIVER_CENTRIC, SYSTEM_CENTRIC)


@dataclass(frozen=True)
class Step:
    """One decision: who acted, on what observation, and the paid reward."""

    time: float
    driver_id: int
    obs: Observation
    action: int
    reward: float


@dataclass
class EpisodeLog:
    steps: list[Step] = field(default_factory=list)
    end_time: float = 0.0
    total_reward: float = 0.0
    counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Optional[Observation]  # None on terminal transitions
    dt: float
    done: bool
    perspective: str


def discount(gamma: float, dt: float) -> float:
    """Continuous-time discount factor gamma raised to the elapsed time."""
    return gamma**dt


def rollout_episode(engine: Engine, scenario: Scenario, seed: int,
                    act: Callable[[Observation], int]) -> EpisodeLog:
    """Play one episode, with act mapping each observation to an action index."""
    obs = engine.reset(scenario, seed=seed)
    log = EpisodeLog()
    while True:
        a = act(obs)
        reward, nxt, _ = engine.step(engine.action_from_index(obs, a))
        log.steps.append(Step(obs.time, int(obs.driver_ids[obs.selected_index]), obs, a, reward))
        log.total_reward += reward
        if isinstance(nxt, EpisodeEnd):
            log.end_time = nxt.time
            log.counts = nxt.counts
            return log
        obs = nxt


def _chain(steps: list[Step], end_time: float, perspective: str) -> list[Transition]:
    out = []
    for i, s in enumerate(steps):
        last = i + 1 == len(steps)
        nxt = None if last else steps[i + 1].obs
        dt = (end_time if last else steps[i + 1].time) - s.time
        out.append(Transition(s.obs, s.action, s.reward, nxt, dt, last, perspective))
    return out


def build_system_centric(log: EpisodeLog) -> list[Transition]:
    """Chain globally consecutive decisions; exactly one transition per step."""
    return _chain(log.steps, log.end_time, SYSTEM_CENTRIC)


def build_driver_centric(log: EpisodeLog) -> dict[int, list[Transition]]:
    """Chain each driver's own decisions into a per-driver stream.

    The streams partition the log: every step lands in exactly one stream,
    and each driver's final decision becomes that stream's terminal
    transition.
    """
    by_driver: dict[int, list[Step]] = {}
    for s in log.steps:
        by_driver.setdefault(s.driver_id, []).append(s)
    return {d: _chain(steps, log.end_time, DRIVER_CENTRIC)
            for d, steps in by_driver.items()}


@dataclass
class TrainerConfig:
    """Hyperparameters shared by the value-based and policy-gradient loops."""

    gamma: float = 0.99
    batch_size: int = 32
    lr_q: float = 1e-4
    epsilon_start: float = 0.99
    epsilon_step: float = 0.01
    epsilon_floor: float = 0.1
    target_copy_every: int = 100
    n_step: int = 1  # 20 for the system view
    replay_capacity: int = 20000
    clip: float = 0.2
    gae_lambda: float = 0.95
    updates_per_epoch: int = 20
    steps_per_epoch: int = 4000
    lr_policy: float = 1e-4
    lr_value: float = 5e-4
    entropy_start: float = 0.01
    entropy_final: float = 0.01
    entropy_anneal_epochs: int = 0
    parallel_envs: int = 1

    def __post_init__(self) -> None:
        for name in ("batch_size", "lr_q", "epsilon_start", "epsilon_floor",
                     "target_copy_every", "n_step", "replay_capacity",
                     "gae_lambda", "updates_per_epoch", "steps_per_epoch",
                     "lr_policy", "lr_value", "parallel_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")
        if self.epsilon_step < 0 or self.entropy_anneal_epochs < 0:
            raise ValueError("schedule rates cannot be negative")
