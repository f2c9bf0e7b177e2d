"""Continuous-time, event-driven dispatch simulator.

The world is a rectangle with one fleet of drivers and a stream of orders.
Time advances through a heap of timestamped events; whenever a driver
becomes free (it enters the system, finishes a trip, or finishes a
repositioning move) the simulation pauses at a decision point and asks for
an action on behalf of exactly that driver.  If any open order lies within
the broadcast radius the driver must take one of them; otherwise it picks
one of nine repositioning moves (eight compass directions or staying put).
Rewards are order prices, collected at assignment time.

In simple mode (used by the non-repositioning baselines) the broadcast
radius is ignored, repositioning is illegal, and a driver with no open
orders parks where it stands until new orders arrive.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from . import features
from .features import ASSIGN, REPOSITION, ActionSet, Observation

# Compass directions, counter-clockwise from east; index 8 stays put.
_SQ = math.sqrt(0.5)
COMPASS = np.array(
    [
        [1.0, 0.0],  # E
        [_SQ, _SQ],  # NE
        [0.0, 1.0],  # N
        [-_SQ, _SQ],  # NW
        [-1.0, 0.0],  # W
        [-_SQ, -_SQ],  # SW
        [0.0, -1.0],  # S
        [_SQ, -_SQ],  # SE
        [0.0, 0.0],  # stay
    ]
)
STAY_INDEX = 8

OPEN, ASSIGNED, COMPLETED, EXPIRED = "open", "assigned", "completed", "expired"
IDLE, SERVING, REPOSITIONING = "idle", "serving", "repositioning"


class IllegalActionError(ValueError):
    """Raised when step() receives an action outside the current legal set."""


class SchemeError(ValueError):
    """Raised when a scenario cannot produce a usable episode."""


@dataclass
class SimConfig:
    region: tuple[float, float] = (1.0, 1.0)
    driver_speed: float = 0.1
    broadcast_radius: float = 0.3
    reposition_duration: float = 1.0
    reposition_noise: float = 0.01  # stddev of the duration jitter
    order_window: float = 5.0  # validity window for fresh orders
    horizon: float = 200.0
    simple_mode: bool = False
    rng_seed: int = 0
    time_scale: Optional[float] = None  # feature normalization; None picks a default

    def __post_init__(self):
        if self.region[0] <= 0 or self.region[1] <= 0:
            raise ValueError("region sides must be positive")
        if self.driver_speed <= 0:
            raise ValueError("driver_speed must be positive")
        if self.broadcast_radius <= 0:
            raise ValueError("broadcast_radius must be positive")
        if self.reposition_duration <= 0:
            raise ValueError("reposition_duration must be positive")
        if self.reposition_noise < 0:
            raise ValueError("reposition_noise must be non-negative")
        if self.order_window <= 0 or self.horizon <= 0:
            raise ValueError("order_window and horizon must be positive")

    @property
    def longer_side(self) -> float:
        return max(self.region)

    @property
    def feature_time_scale(self) -> float:
        if self.time_scale is not None:
            return self.time_scale
        return self.longer_side / self.driver_speed

    @property
    def reposition_displacement(self) -> float:
        return self.driver_speed * self.reposition_duration


@dataclass(frozen=True)
class OrderSpec:
    time: float
    origin: tuple[float, float]
    dest: tuple[float, float]
    price: float


@dataclass(frozen=True)
class DriverSpec:
    time: float
    position: tuple[float, float]
    active_for: Optional[float] = None  # None: stays until the horizon


class OrderScheme(Protocol):  # pragma: no cover
    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]: ...


class DriverScheme(Protocol):  # pragma: no cover
    def sample_drivers(self, cfg: SimConfig, rng: np.random.Generator) -> list[DriverSpec]: ...


@dataclass(frozen=True)
class Scenario:
    config: SimConfig
    orders: "OrderScheme"
    drivers: "DriverScheme"


@dataclass
class Order:
    id: int
    origin: np.ndarray
    dest: np.ndarray
    price: float
    created_at: float
    expires_at: float
    status: str = OPEN
    driver_id: Optional[int] = None
    assigned_at: Optional[float] = None


@dataclass
class Driver:
    id: int
    position: np.ndarray
    state: str = IDLE
    busy_until: float = 0.0
    serving_order_id: Optional[int] = None
    serving_dest: Optional[np.ndarray] = None
    repo_dir: Optional[np.ndarray] = None
    repo_from: Optional[np.ndarray] = None
    repo_started: float = 0.0
    deactivates_at: float = math.inf
    leave_when_done: bool = False

    def observed_position(self, now: float) -> np.ndarray:
        """Where the rest of the system sees this driver.

        Serving drivers are reported at their trip destination; repositioning
        drivers at their interpolated location.
        """
        if self.state == SERVING:
            return self.serving_dest
        if self.state == REPOSITIONING:
            return self.repo_from + self.repo_dir * ((now - self.repo_started) * self._speed)
        return self.position

    _speed: float = 0.0  # cached from config at activation; keeps interpolation local


@dataclass
class EpisodeEnd:
    time: float
    total_reward: float
    decisions: int
    counts: dict


@dataclass(frozen=True)
class Action:
    kind: str  # features.ASSIGN or features.REPOSITION
    order_id: Optional[int] = None
    direction: Optional[int] = None

    @staticmethod
    def assign(order_id: int) -> "Action":
        return Action(ASSIGN, order_id=order_id)

    @staticmethod
    def reposition(direction: int) -> "Action":
        return Action(REPOSITION, direction=direction)


# event kinds, handled in Engine._handle
_EV_ORDER = "order"
_EV_EXPIRY = "expiry"
_EV_SERVE_DONE = "serve_done"
_EV_REPO_DONE = "repo_done"
_EV_DRIVER_IN = "driver_in"
_EV_DRIVER_OUT = "driver_out"


class Engine:
    """One simulated episode at a time; reset() rebuilds everything."""

    def __init__(self):
        self.cfg: Optional[SimConfig] = None
        self._ended = True

    # -- lifecycle ----------------------------------------------------------

    def reset(self, scenario: Scenario, seed: Optional[int] = None) -> Observation:
        cfg = scenario.config
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
        self.now = 0.0
        self._seq = 0
        self._events: list = []
        self.orders: dict[int, Order] = {}
        self.drivers: dict[int, Driver] = {}
        self._open: dict[int, Order] = {}  # insertion ordered
        self._parked: deque[int] = deque()
        self._pending: deque[int] = deque()  # drivers owed a decision at self.now
        self._selected: Optional[int] = None
        self._ended = False
        self.total_reward = 0.0
        self.assigned_prices: list[float] = []
        self.decisions = 0
        self.created = 0

        order_specs = scenario.orders.sample_orders(cfg, self.rng)
        driver_specs = scenario.drivers.sample_drivers(cfg, self.rng)
        if not driver_specs:
            raise SchemeError("scheme provides no drivers")
        for spec in order_specs:
            oid = len(self.orders)
            self.orders[oid] = Order(
                oid,
                np.asarray(spec.origin, dtype=float),
                np.asarray(spec.dest, dtype=float),
                float(spec.price),
                float(spec.time),
                float(spec.time) + cfg.order_window,
            )
            self._push(spec.time, _EV_ORDER, oid)
        self._inactive: dict[int, Driver] = {}
        for i, spec in enumerate(driver_specs):
            d = Driver(i, np.asarray(spec.position, dtype=float))
            d._speed = cfg.driver_speed
            if spec.active_for is not None:
                d.deactivates_at = spec.time + spec.active_for
            self._inactive[i] = d
            self._push(spec.time, _EV_DRIVER_IN, i)

        nxt = self._advance()
        if isinstance(nxt, EpisodeEnd):
            raise SchemeError("scheme produced no decision point before the horizon")
        return nxt

    def step(self, action: Action):
        """Apply the selected driver's action.

        Returns (reward, next, elapsed) where next is the Observation at the
        following decision point or an EpisodeEnd, and elapsed is simulated
        time consumed by this step.
        """
        if self._ended or self._selected is None:
            raise IllegalActionError("no decision point is pending")
        cfg = self.cfg
        driver = self.drivers[self._selected]
        t0 = self.now
        reward = 0.0

        if action.kind == ASSIGN:
            order = self.orders.get(action.order_id)
            if order is None or order.status != OPEN:
                raise IllegalActionError(f"order {action.order_id} is not open")
            if not cfg.simple_mode:
                gap = float(np.linalg.norm(order.origin - driver.position))
                if gap > cfg.broadcast_radius:
                    raise IllegalActionError(
                        f"order {order.id} at distance {gap:.4f} is outside the broadcast radius"
                    )
            order.status = ASSIGNED
            order.driver_id = driver.id
            order.assigned_at = self.now
            del self._open[order.id]
            reward = order.price
            self.total_reward += reward
            self.assigned_prices.append(reward)
            pickup = float(np.linalg.norm(order.origin - driver.position)) / cfg.driver_speed
            trip = float(np.linalg.norm(order.dest - order.origin)) / cfg.driver_speed
            driver.state = SERVING
            driver.serving_order_id = order.id
            driver.serving_dest = order.dest
            driver.busy_until = self.now + pickup + trip
            self._push(driver.busy_until, _EV_SERVE_DONE, driver.id)
        elif action.kind == REPOSITION:
            if cfg.simple_mode:
                raise IllegalActionError("repositioning is disabled in simple mode")
            if self._in_radius_rows(driver):
                raise IllegalActionError("open orders in radius: assignment is mandatory")
            if action.direction is None or not 0 <= action.direction < len(COMPASS):
                raise IllegalActionError(f"bad reposition direction {action.direction}")
            duration = self._noisy_duration()
            driver.state = REPOSITIONING
            driver.repo_dir = COMPASS[action.direction]
            driver.repo_from = driver.position.copy()
            driver.repo_started = self.now
            driver.busy_until = self.now + duration
            self._push(driver.busy_until, _EV_REPO_DONE, driver.id)
        else:
            raise IllegalActionError(f"unknown action kind {action.kind!r}")

        self.decisions += 1
        self._selected = None
        nxt = self._advance()
        return reward, nxt, self.now - t0

    # -- queries ------------------------------------------------------------

    @property
    def selected_driver_id(self) -> Optional[int]:
        return self._selected

    def legal_actions(self, driver_id: int) -> ActionSet:
        if driver_id != self._selected:
            raise IllegalActionError(f"driver {driver_id} is not the available driver")
        return self._action_set(self.drivers[driver_id])

    def counts(self) -> dict:
        """Order bookkeeping: created = open + assigned + completed + expired.

        Tallies cover only orders whose arrival event has fired.
        """
        c = {"created": self.created, OPEN: 0, ASSIGNED: 0, COMPLETED: 0, EXPIRED: 0}
        for o in self.orders.values():
            if o.id in self._open or o.status != OPEN:
                c[o.status] += 1
        return c

    def idle_driver_ids(self) -> list[int]:
        return [d.id for d in self.drivers.values() if d.state == IDLE]

    # -- internals ----------------------------------------------------------

    def _push(self, at: float, kind: str, ident: int) -> None:
        heapq.heappush(self._events, (at, self._seq, kind, ident))
        self._seq += 1

    def _noisy_duration(self) -> float:
        cfg = self.cfg
        base = cfg.reposition_duration
        if cfg.reposition_noise == 0.0:
            return base
        while True:
            eps = self.rng.normal(0.0, cfg.reposition_noise)
            if eps > -base / 2.0:
                return base + eps

    def _clip_to_region(self, pos: np.ndarray) -> np.ndarray:
        w, h = self.cfg.region
        pos[0] = min(max(pos[0], 0.0), w)
        pos[1] = min(max(pos[1], 0.0), h)
        return pos

    def _advance(self):
        cfg = self.cfg
        while True:
            # decisions owed at the current instant come first
            while self._pending:
                did = self._pending.popleft()
                d = self.drivers.get(did)
                if d is None or d.state != IDLE:
                    continue
                if cfg.simple_mode and not self._open:
                    self._parked.append(did)
                    continue
                return self._make_observation(did)
            if cfg.simple_mode and self._parked and self._open:
                did = self._parked.popleft()
                return self._make_observation(did)
            if not self._events or self._events[0][0] >= cfg.horizon:
                self.now = cfg.horizon
                self._ended = True
                return EpisodeEnd(cfg.horizon, self.total_reward, self.decisions, self.counts())
            # drain every event at this timestamp before pausing, so each
            # observation reflects the complete state at that time
            at = self._events[0][0]
            self.now = at
            while self._events and self._events[0][0] == at:
                _, _, kind, ident = heapq.heappop(self._events)
                freed = self._handle(kind, ident)
                if freed is not None:
                    self._pending.append(freed.id)

    def _handle(self, kind: str, ident: int) -> Optional[Driver]:
        if kind == _EV_ORDER:
            order = self.orders[ident]
            self.created += 1
            self._open[ident] = order
            self._push(order.expires_at, _EV_EXPIRY, ident)
            return None
        if kind == _EV_EXPIRY:
            # closed boundary: an order whose deadline equals now is gone
            for oid in [o.id for o in self._open.values() if o.expires_at <= self.now]:
                self._open[oid].status = EXPIRED
                del self._open[oid]
            return None
        if kind == _EV_SERVE_DONE:
            d = self.drivers[ident]
            order = self.orders[d.serving_order_id]
            order.status = COMPLETED
            d.position = order.dest.copy()
            d.state = IDLE
            d.serving_order_id = None
            d.serving_dest = None
            return self._maybe_free(d)
        if kind == _EV_REPO_DONE:
            d = self.drivers[ident]
            end = d.repo_from + d.repo_dir * ((self.now - d.repo_started) * self.cfg.driver_speed)
            d.position = self._clip_to_region(end)
            d.state = IDLE
            d.repo_dir = None
            d.repo_from = None
            return self._maybe_free(d)
        if kind == _EV_DRIVER_IN:
            d = self._inactive.pop(ident)
            d.state = IDLE
            self.drivers[ident] = d
            if d.deactivates_at < math.inf:
                self._push(d.deactivates_at, _EV_DRIVER_OUT, ident)
            return self._maybe_free(d)
        if kind == _EV_DRIVER_OUT:
            d = self.drivers.get(ident)
            if d is None:
                return None
            if d.state == IDLE:
                self._remove_driver(d)
            else:
                d.leave_when_done = True
            return None
        raise RuntimeError(f"unhandled event kind {kind!r}")

    def _maybe_free(self, d: Driver) -> Optional[Driver]:
        if d.leave_when_done or d.deactivates_at <= self.now:
            self._remove_driver(d)
            return None
        return d

    def _remove_driver(self, d: Driver) -> None:
        del self.drivers[d.id]
        for q in (self._parked, self._pending):
            try:
                q.remove(d.id)
            except ValueError:
                pass

    def _in_radius_rows(self, driver: Driver):
        cfg = self.cfg
        rows = []
        for row, order in enumerate(self._open.values()):
            if np.linalg.norm(order.origin - driver.position) <= cfg.broadcast_radius:
                rows.append(row)
        return rows

    def _action_set(self, driver: Driver) -> ActionSet:
        if self.cfg.simple_mode:
            rows = np.arange(len(self._open), dtype=np.int64)
            return ActionSet(ASSIGN, rows)
        rows = self._in_radius_rows(driver)
        if rows:
            return ActionSet(ASSIGN, np.asarray(rows, dtype=np.int64))
        return ActionSet(REPOSITION)

    def _make_observation(self, driver_id: int) -> Observation:
        cfg = self.cfg
        self._selected = driver_id
        drivers = list(self.drivers.values())
        open_orders = list(self._open.values())
        sel_index = next(i for i, d in enumerate(drivers) if d.id == driver_id)
        return Observation(
            time=self.now,
            time_norm=self.now / cfg.horizon,
            drivers=features.encode_drivers(drivers, self.now, cfg),
            orders=features.encode_orders(open_orders, self.now, cfg),
            selected_index=sel_index,
            action_set=self._action_set(self.drivers[driver_id]),
            driver_ids=np.array([d.id for d in drivers], dtype=np.int64),
            order_ids=np.array([o.id for o in open_orders], dtype=np.int64),
        )

    def action_from_index(self, obs: Observation, index: int) -> Action:
        """Translate a policy's score index into an engine Action."""
        aset = obs.action_set
        if not 0 <= index < len(aset):
            raise IllegalActionError(f"action index {index} out of range")
        if aset.kind == ASSIGN:
            row = int(aset.order_rows[index])
            return Action.assign(int(obs.order_ids[row]))
        return Action.reposition(index)
