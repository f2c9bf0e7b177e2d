"""Observation encoding: fixed six-feature rows for orders and drivers plus
the action set offered to the policy at a decision point.

Coordinates are normalized by the longer side of the region rectangle, an
order's waiting time by its validity window (clamped to [0, 1]), and task
completion times by a configurable time scale that defaults to the time a
driver needs to cross the region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .engine import Driver, Order, SimConfig

ORDER_DIM = 6
DRIVER_DIM = 6

ASSIGN = "assign"
REPOSITION = "reposition"
N_REPO_ACTIONS = 9


@dataclass(frozen=True)
class ActionSet:
    """Legal actions at a decision point.

    kind == "assign": one action per entry of order_rows, each a row index
    into the observation's orders matrix.
    kind == "reposition": nine actions, the eight compass directions plus
    stay, indexed as in engine.COMPASS.
    """

    kind: str
    order_rows: Optional[np.ndarray] = None

    def __len__(self) -> int:
        if self.kind == ASSIGN:
            return len(self.order_rows)
        return N_REPO_ACTIONS


@dataclass
class Observation:
    time: float
    time_norm: float
    drivers: np.ndarray  # (M, DRIVER_DIM)
    orders: np.ndarray  # (N, ORDER_DIM), all open orders, in and out of radius
    selected_index: int  # row of the driver awaiting an action
    action_set: ActionSet
    driver_ids: np.ndarray  # (M,)
    order_ids: np.ndarray  # (N,)

    @property
    def n_actions(self) -> int:
        return len(self.action_set)


def encode_order(order: "Order", now: float, cfg: "SimConfig") -> np.ndarray:
    side = cfg.longer_side
    window = order.expires_at - order.created_at
    waiting = 0.0 if window <= 0 else (now - order.created_at) / window
    return np.array(
        [
            order.origin[0] / side,
            order.origin[1] / side,
            order.dest[0] / side,
            order.dest[1] / side,
            order.price,
            min(max(waiting, 0.0), 1.0),
        ]
    )


def encode_driver(driver: "Driver", now: float, cfg: "SimConfig") -> np.ndarray:
    side = cfg.longer_side
    scale = cfg.feature_time_scale
    row = np.zeros(DRIVER_DIM)
    pos = driver.observed_position(now)
    row[0] = pos[0] / side
    row[1] = pos[1] / side
    if driver.state == "serving":
        row[4] = (driver.busy_until - now) / scale
    elif driver.state == "repositioning":
        row[2] = driver.repo_dir[0]
        row[3] = driver.repo_dir[1]
        row[5] = (driver.busy_until - now) / scale
    return row


def encode_orders(orders, now: float, cfg: "SimConfig") -> np.ndarray:
    if not orders:
        return np.zeros((0, ORDER_DIM))
    return np.stack([encode_order(o, now, cfg) for o in orders])


def encode_drivers(drivers, now: float, cfg: "SimConfig") -> np.ndarray:
    if not drivers:
        return np.zeros((0, DRIVER_DIM))
    return np.stack([encode_driver(d, now, cfg) for d in drivers])
