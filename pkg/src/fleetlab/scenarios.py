"""Scenario construction: geometry, demand processes and fleets for the five
benchmark domains.

Illustrative domains live on the unit square with speed 0.1 and broadcast
radius 0.3; the two historical domains run in kilometres and hours (region
20 x 20 km, 40 km/h, 2 km radius). Each constructor returns a Scenario
bundling the SimConfig with an order scheme and a driver scheme.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import DriverSpec, OrderSpec, Scenario, SimConfig
from .util import read_blob

# ---------------------------------------------------------------------------
# geometry helper
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        pts = rng.uniform(size=(n, 2))
        pts[:, 0] = self.x0 + pts[:, 0] * (self.x1 - self.x0)
        pts[:, 1] = self.y0 + pts[:, 1] * (self.y1 - self.y0)
        return pts


def _poisson_times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(rate * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=n))


# ---------------------------------------------------------------------------
# fleets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformFleet:
    """n drivers, all active from t = 0, spawned uniformly in a box."""

    n: int
    box: Optional[Box] = None

    def sample_drivers(self, cfg: SimConfig, rng: np.random.Generator) -> list[DriverSpec]:
        box = self.box or Box(0.0, 0.0, cfg.region[0], cfg.region[1])
        pts = box.sample(rng, self.n)
        return [DriverSpec(0.0, (float(x), float(y))) for x, y in pts]


# ---------------------------------------------------------------------------
# regional flows
# ---------------------------------------------------------------------------

REGIONAL_CENTER = Box(0.40, 0.40, 0.60, 0.60)
REGIONAL_UPPER_LEFT = Box(0.05, 0.75, 0.25, 0.95)
REGIONAL_BOTTOM_RIGHT = Box(0.75, 0.05, 0.95, 0.25)

# (origin region, destination region, price); the trip back from the
# bottom-right region pays double
REGIONAL_FLOWS = (
    (REGIONAL_CENTER, REGIONAL_UPPER_LEFT, 2.0),
    (REGIONAL_CENTER, REGIONAL_BOTTOM_RIGHT, 2.0),
    (REGIONAL_UPPER_LEFT, REGIONAL_CENTER, 2.0),
    (REGIONAL_BOTTOM_RIGHT, REGIONAL_CENTER, 4.0),
)

DEMAND_RATES = {"high": 2.0, "low": 0.5}


@dataclass(frozen=True)
class RegionalScheme:
    rate: float

    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]:
        times = _poisson_times(self.rate, cfg.horizon, rng)
        kinds = rng.integers(0, len(REGIONAL_FLOWS), size=len(times))
        specs = []
        for t, k in zip(times, kinds):
            src, dst, price = REGIONAL_FLOWS[k]
            o = src.sample(rng)[0]
            d = dst.sample(rng)[0]
            specs.append(OrderSpec(float(t), (o[0], o[1]), (d[0], d[1]), price))
        return specs


def regional(demand: str = "high", n_drivers: int = 10, rate: Optional[float] = None,
             simple_mode: bool = False) -> Scenario:
    cfg = SimConfig(order_window=2.0, simple_mode=simple_mode)
    if rate is None:
        rate = DEMAND_RATES[demand]
    return Scenario(cfg, RegionalScheme(rate), UniformFleet(n_drivers))


# ---------------------------------------------------------------------------
# hot / cold destinations
# ---------------------------------------------------------------------------

HOT_BAND_HEIGHT = 0.2


@dataclass(frozen=True)
class HotColdScheme:
    """Origins on the top edge; destinations flip a fair coin between the hot
    band below the top edge and the bottom edge. Price is trip distance."""

    rate: float
    hot_height: float = HOT_BAND_HEIGHT

    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]:
        w, h = cfg.region
        times = _poisson_times(self.rate, cfg.horizon, rng)
        specs = []
        for t in times:
            origin = (float(rng.uniform(0.0, w)), h)
            if rng.random() < 0.5:
                dest = (float(rng.uniform(0.0, w)), float(rng.uniform(h - self.hot_height, h)))
            else:
                dest = (float(rng.uniform(0.0, w)), 0.0)
            price = math.dist(origin, dest)
            specs.append(OrderSpec(float(t), origin, dest, price))
        return specs


def hot_cold(demand: str = "high", n_drivers: int = 10, rate: Optional[float] = None,
             simple_mode: bool = False) -> Scenario:
    cfg = SimConfig(order_window=2.0, simple_mode=simple_mode)
    if rate is None:
        rate = DEMAND_RATES[demand]
    return Scenario(cfg, HotColdScheme(rate), UniformFleet(n_drivers))


# ---------------------------------------------------------------------------
# distribute
# ---------------------------------------------------------------------------

DISTRIBUTE_TOP_LEFT = Box(0.10, 0.70, 0.30, 0.90)
DISTRIBUTE_BOTTOM_RIGHT = Box(0.70, 0.10, 0.90, 0.30)
DISTRIBUTE_SPAWN = Box(0.40, 0.40, 0.60, 0.60)
SPLITS = {"50-50": 0.5, "80-20": 0.8}


@dataclass(frozen=True)
class DistributeScheme:
    """Two-phase episode: an empty warm-up in which drivers can only
    reposition, then k unit-price orders split between two far patches.

    Patch counts use round-half-up on split * k. Destinations are the point
    reflection through the region centre, far enough that a driver serves at
    most one order before the episode ends.
    """

    k: int
    split: float
    phase1: float

    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]:
        w, h = cfg.region
        n_tl = int(math.floor(self.split * self.k + 0.5))
        n_br = self.k - n_tl
        origins = np.vstack(
            [DISTRIBUTE_TOP_LEFT.sample(rng, n_tl), DISTRIBUTE_BOTTOM_RIGHT.sample(rng, n_br)]
        )
        specs = []
        for x, y in origins:
            specs.append(OrderSpec(self.phase1, (float(x), float(y)), (w - float(x), h - float(y)), 1.0))
        return specs


def distribute(k: int = 20, split: float = 0.5, phase1_repositions: int = 3) -> Scenario:
    """k drivers in the middle must spread over two order patches.

    The warm-up phase lasts phase1_repositions repositioning moves; the order
    phase lasts one more move plus slack for the pick-up decision.
    """
    base = SimConfig()
    phase1 = phase1_repositions * base.reposition_duration
    phase2 = 1.5 * base.reposition_duration
    cfg = SimConfig(horizon=phase1 + phase2, order_window=phase2)
    return Scenario(cfg, DistributeScheme(k, split, phase1), UniformFleet(k, DISTRIBUTE_SPAWN))


# ---------------------------------------------------------------------------
# historical replay
# ---------------------------------------------------------------------------

HISTORICAL_REGION_KM = (20.0, 20.0)
CSV_HEADER = ["day", "time_seconds", "origin_x_km", "origin_y_km", "dest_x_km", "dest_y_km"]


def load_order_days(path) -> dict[int, np.ndarray]:
    """Parse a day-record CSV into {day: (n, 5) array of (hours, ox, oy, dx, dy)}.

    The header row is mandatory and validated; coordinates must fit the
    20 x 20 km region.
    """
    days: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns")
            day = int(row[0])
            t = float(row[1]) / 3600.0
            ox, oy, dx, dy = (float(v) for v in row[2:])
            for v, w in ((ox, HISTORICAL_REGION_KM[0]), (oy, HISTORICAL_REGION_KM[1]),
                         (dx, HISTORICAL_REGION_KM[0]), (dy, HISTORICAL_REGION_KM[1])):
                if not 0.0 <= v <= w:
                    raise ValueError(f"{path}:{lineno}: coordinate {v} outside the region")
            days.setdefault(day, []).append((t, ox, oy, dx, dy))
    if not days:
        raise ValueError(f"{path}: no order rows")
    return {day: np.array(rows) for day, rows in days.items()}


@dataclass(frozen=True)
class ReplayScheme:
    """Replays one recorded day per episode; price equals trip distance."""

    days: dict[int, np.ndarray]
    fixed_day: Optional[int] = None

    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]:
        keys = sorted(self.days)
        if self.fixed_day is not None:
            if self.fixed_day not in self.days:
                raise ValueError(f"day {self.fixed_day} not present in the data")
            day = self.fixed_day
        else:
            day = keys[int(rng.integers(len(keys)))]
        rows = self.days[day]
        specs = []
        for t, ox, oy, dx, dy in rows:
            price = math.hypot(dx - ox, dy - oy)
            specs.append(OrderSpec(float(t), (float(ox), float(oy)), (float(dx), float(dy)), price))
        return specs


def historical_config(simple_mode: bool = False) -> SimConfig:
    return SimConfig(
        region=HISTORICAL_REGION_KM,
        driver_speed=40.0,  # km/h
        broadcast_radius=2.0,  # km
        reposition_duration=0.05,  # 3 minutes, one broadcast radius of travel
        reposition_noise=0.002,
        order_window=0.25,
        horizon=24.0,
        simple_mode=simple_mode,
    )


def historical_orders(data_path, n_drivers: int = 100, fixed_day: Optional[int] = None,
                      simple_mode: bool = False) -> Scenario:
    days = load_order_days(data_path)
    return Scenario(historical_config(simple_mode), ReplayScheme(days, fixed_day),
                    UniformFleet(n_drivers))


# ---------------------------------------------------------------------------
# historical statistics (rate grid)
# ---------------------------------------------------------------------------

GRID_TILES = 20  # per side
GRID_HOURS = 24
RATE_GRID_KIND = "fleetlab-rate-grid"
ORDER_SCALE = 0.5
DRIVER_SCALE = 0.07 * 0.5
DRIVER_ACTIVE_HOURS = 6.0


def tile_box(flat_index: int, region=HISTORICAL_REGION_KM) -> Box:
    """Tile geometry for a flat index; flat = x_tile * GRID_TILES + y_tile."""
    ix, iy = divmod(int(flat_index), GRID_TILES)
    tw = region[0] / GRID_TILES
    th = region[1] / GRID_TILES
    return Box(ix * tw, iy * th, (ix + 1) * tw, (iy + 1) * th)


def load_rate_grid(path):
    """Read a rate-grid file, returning (order_rates, driver_rates).

    order_rates must be exactly (400, 400, 24): hourly order intensities per
    (origin tile, destination tile). driver_rates must be (400, 24): hourly
    driver activations per tile.
    """
    _, arrays, meta = read_blob(path, expect_kind=RATE_GRID_KIND)
    n = GRID_TILES * GRID_TILES
    order_rates = arrays.get("order_rates")
    driver_rates = arrays.get("driver_rates")
    if order_rates is None or order_rates.shape != (n, n, GRID_HOURS):
        raise ValueError(f"{path}: order_rates must have shape {(n, n, GRID_HOURS)}")
    if driver_rates is None or driver_rates.shape != (n, GRID_HOURS):
        raise ValueError(f"{path}: driver_rates must have shape {(n, GRID_HOURS)}")
    if np.any(order_rates < 0) or np.any(driver_rates < 0):
        raise ValueError(f"{path}: rates must be non-negative")
    return order_rates, driver_rates


class GridOrderScheme:
    """Poisson order counts per (origin tile, destination tile, hour)."""

    def __init__(self, rates: np.ndarray, scale: float = ORDER_SCALE):
        self.scale = scale
        # sample only cells that can produce anything
        src, dst, hour = np.nonzero(rates)
        self._src = src
        self._dst = dst
        self._hour = hour
        self._lam = rates[src, dst, hour] * scale

    def sample_orders(self, cfg: SimConfig, rng: np.random.Generator) -> list[OrderSpec]:
        counts = rng.poisson(self._lam)
        idx = np.repeat(np.arange(len(counts)), counts)
        n = len(idx)
        times = self._hour[idx] + rng.uniform(size=n)
        origins = np.empty((n, 2))
        dests = np.empty((n, 2))
        u = rng.uniform(size=(n, 4))
        for j, (flat, out) in enumerate(((self._src[idx], origins), (self._dst[idx], dests))):
            box_x, box_y = np.divmod(flat, GRID_TILES)
            tw = cfg.region[0] / GRID_TILES
            th = cfg.region[1] / GRID_TILES
            out[:, 0] = (box_x + u[:, 2 * j]) * tw
            out[:, 1] = (box_y + u[:, 2 * j + 1]) * th
        specs = []
        for i in range(n):
            price = math.hypot(dests[i, 0] - origins[i, 0], dests[i, 1] - origins[i, 1])
            specs.append(
                OrderSpec(float(times[i]), (origins[i, 0], origins[i, 1]), (dests[i, 0], dests[i, 1]), price)
            )
        return specs


class GridDriverScheme:
    """Poisson driver activations per (tile, hour); each driver stays active
    for a fixed shift length."""

    def __init__(self, rates: np.ndarray, scale: float = DRIVER_SCALE,
                 active_hours: float = DRIVER_ACTIVE_HOURS):
        self.scale = scale
        self.active_hours = active_hours
        tile, hour = np.nonzero(rates)
        self._tile = tile
        self._hour = hour
        self._lam = rates[tile, hour] * scale

    def sample_drivers(self, cfg: SimConfig, rng: np.random.Generator) -> list[DriverSpec]:
        counts = rng.poisson(self._lam)
        idx = np.repeat(np.arange(len(counts)), counts)
        n = len(idx)
        times = self._hour[idx] + rng.uniform(size=n)
        u = rng.uniform(size=(n, 2))
        tx, ty = np.divmod(self._tile[idx], GRID_TILES)
        tw = cfg.region[0] / GRID_TILES
        th = cfg.region[1] / GRID_TILES
        specs = []
        for i in range(n):
            pos = ((tx[i] + u[i, 0]) * tw, (ty[i] + u[i, 1]) * th)
            specs.append(DriverSpec(float(times[i]), pos, self.active_hours))
        return specs


def historical_statistics(grid_path, order_scale: float = ORDER_SCALE,
                          driver_scale: float = DRIVER_SCALE,
                          simple_mode: bool = False) -> Scenario:
    order_rates, driver_rates = load_rate_grid(grid_path)
    return Scenario(
        historical_config(simple_mode),
        GridOrderScheme(order_rates, order_scale),
        GridDriverScheme(driver_rates, driver_scale),
    )


# ---------------------------------------------------------------------------
# registry used by the command line
# ---------------------------------------------------------------------------


def build_scenario(domain: str, variant: Optional[str] = None, n_drivers: Optional[int] = None,
                   data_path=None, fixed_day: Optional[int] = None,
                   simple_mode: bool = False) -> Scenario:
    """Uniform constructor: (domain, variant) to Scenario.

    Domains: regional, hotcold, distribute, historical-orders,
    historical-stats. Variants: high/low demand for the first two, 50-50 or
    80-20 for distribute. simple_mode builds the auto-dispatch flavour that
    the *-simple baselines need; distribute has no such flavour because its
    warm-up phase is all repositioning.
    """
    if domain == "regional":
        return regional(variant or "high", n_drivers or 10, simple_mode=simple_mode)
    if domain == "hotcold":
        return hot_cold(variant or "high", n_drivers or 10, simple_mode=simple_mode)
    if domain == "distribute":
        if simple_mode:
            raise ValueError("distribute cannot run in simple mode")
        split = SPLITS[variant or "50-50"]
        return distribute(n_drivers or 20, split)
    if domain == "historical-orders":
        if data_path is None:
            raise ValueError("historical-orders needs --data pointing at a day-record CSV")
        return historical_orders(data_path, n_drivers or 100, fixed_day, simple_mode)
    if domain == "historical-stats":
        if data_path is None:
            raise ValueError("historical-stats needs --data pointing at a rate-grid file")
        return historical_statistics(data_path, simple_mode=simple_mode)
    raise ValueError(f"unknown domain {domain!r}")
