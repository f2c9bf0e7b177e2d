"""Myopic dispatch policies: two assignment objectives crossed with three
repositioning behaviors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import COMPASS, STAY_INDEX, Scenario
from .features import ASSIGN, Observation

MRM = "mrm"  # revenue: take the priciest order on offer
MPDM = "mpdm"  # pickup distance: take the closest order on offer

SIMPLE = "simple"
RANDOM = "random"
DEMAND = "demand"

BASELINE_NAMES = tuple(f"{o}-{r}" for o in (MRM, MPDM) for r in (SIMPLE, RANDOM, DEMAND))


@dataclass(frozen=True)
class BaselineSpec:
    objective: str
    reposition: str
    stay_within: float = 0.0  # normalized distance under which Demand stays put

    def __post_init__(self):
        if self.objective not in (MRM, MPDM):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.reposition not in (SIMPLE, RANDOM, DEMAND):
            raise ValueError(f"unknown reposition rule {self.reposition!r}")


def make_baseline(name: str, scenario: Scenario) -> BaselineSpec:
    """Resolve a policy name to its BaselineSpec, checked against the scenario.

    The simple variants only make sense on a simple-mode engine (which
    handles idle drivers itself), and the repositioning variants only on a
    full engine.
    """
    if name not in BASELINE_NAMES:
        raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINE_NAMES}")
    objective, reposition = name.split("-")
    cfg = scenario.config
    if reposition == SIMPLE and not cfg.simple_mode:
        raise ValueError(f"{name} requires a simple_mode scenario")
    if reposition != SIMPLE and cfg.simple_mode:
        raise ValueError(f"{name} cannot run on a simple_mode scenario")
    stay = cfg.reposition_displacement / cfg.longer_side
    return BaselineSpec(objective, reposition, stay_within=stay)


def _pick_order(spec: BaselineSpec, obs: Observation) -> int:
    rows = obs.action_set.order_rows
    me = obs.drivers[obs.selected_index]
    keys = []
    for j, row in enumerate(rows):
        o = obs.orders[row]
        price = float(o[4])
        dist = math.hypot(o[0] - me[0], o[1] - me[1])
        oid = int(obs.order_ids[row])
        if spec.objective == MRM:
            keys.append((-price, dist, oid, j))
        else:
            keys.append((dist, -price, oid, j))
    return min(keys)[3]


def _pick_direction(spec: BaselineSpec, obs: Observation, rng: np.random.Generator) -> int:
    if spec.reposition == SIMPLE:
        raise RuntimeError("simple-mode engines never ask for a repositioning action")
    if spec.reposition == RANDOM or len(obs.orders) == 0:
        return int(rng.integers(len(COMPASS)))
    me = obs.drivers[obs.selected_index]
    dists = np.hypot(obs.orders[:, 0] - me[0], obs.orders[:, 1] - me[1])
    nearest = min(range(len(dists)), key=lambda i: (dists[i], int(obs.order_ids[i])))
    v = obs.orders[nearest, :2] - me[:2]
    if math.hypot(v[0], v[1]) <= spec.stay_within:
        return STAY_INDEX
    return int(np.argmax(COMPASS[:STAY_INDEX] @ v))


def baseline_act(spec: BaselineSpec, obs: Observation, rng: np.random.Generator) -> int:
    """Index of the chosen action within the observation's action set.

    Assignment choices are deterministic; only the random repositioning
    variants consume the generator.
    """
    if obs.action_set.kind == ASSIGN:
        return _pick_order(spec, obs)
    return _pick_direction(spec, obs, rng)
