"""Synthetic order history: a stand-in for real dispatch records.

Generates a multi-day CSV of orders from a small invented city (a handful of
Gaussian hot spots, each with its own rush hour) plus a rate-grid file whose
intensities are the empirical per-day rates of the generated orders. The two
files feed the historical-orders and historical-stats scenarios respectively,
so a full replay-and-train pipeline can run without any external dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenarios import (
    CSV_HEADER,
    GRID_HOURS,
    GRID_TILES,
    HISTORICAL_REGION_KM,
    RATE_GRID_KIND,
)
from .util import write_blob

ORDERS_FILENAME = "orders.csv"
RATES_FILENAME = "rates.grid"


@dataclass(frozen=True)
class HotSpot:
    """One traffic pattern: Gaussian endpoint clouds with a daily rush hour.

    Trip counts split across spots by weight; departure times cluster around
    peak_hour (wrapping at midnight) and endpoints scatter around the two
    centres with a shared standard deviation.
    """

    origin: tuple[float, float]
    dest: tuple[float, float]
    spread_km: float
    peak_hour: float
    width_hours: float
    weight: float


# An invented city inside the 20 x 20 km region: morning commute into the
# centre, the evening flow back out, diffuse midday traffic, and a small
# late-night pattern toward the south-east.
DEFAULT_SPOTS = (
    HotSpot(origin=(4.0, 4.5), dest=(10.0, 11.0), spread_km=1.6,
            peak_hour=8.0, width_hours=1.5, weight=0.32),
    HotSpot(origin=(10.0, 11.0), dest=(4.5, 4.0), spread_km=1.6,
            peak_hour=18.0, width_hours=1.8, weight=0.30),
    HotSpot(origin=(10.0, 9.0), dest=(9.0, 10.5), spread_km=3.5,
            peak_hour=13.0, width_hours=3.0, weight=0.26),
    HotSpot(origin=(10.5, 10.5), dest=(15.0, 5.0), spread_km=2.2,
            peak_hour=22.5, width_hours=1.2, weight=0.12),
)


def _sample_day(rng: np.random.Generator, spots, daily_orders: float):
    """One day of trips as parallel arrays (hours, ox, oy, dx, dy)."""
    n = int(rng.poisson(daily_orders))
    weights = np.array([s.weight for s in spots], dtype=float)
    pick = rng.choice(len(spots), size=n, p=weights / weights.sum())

    def per_order(attr):
        return np.array([getattr(s, attr) for s in spots])[pick]

    hours = (per_order("peak_hour")
             + per_order("width_hours") * rng.standard_normal(n)) % 24.0
    spread = per_order("spread_km")
    w, h = HISTORICAL_REGION_KM
    ox = np.clip(per_order("origin")[:, 0] + spread * rng.standard_normal(n), 0.0, w)
    oy = np.clip(per_order("origin")[:, 1] + spread * rng.standard_normal(n), 0.0, h)
    dx = np.clip(per_order("dest")[:, 0] + spread * rng.standard_normal(n), 0.0, w)
    dy = np.clip(per_order("dest")[:, 1] + spread * rng.standard_normal(n), 0.0, h)
    return hours, ox, oy, dx, dy


def tile_index(x, y, region=HISTORICAL_REGION_KM):
    """Flat tile index (x_tile * GRID_TILES + y_tile) for km coordinates.

    Vectorized; points on the far edge land in the last tile.
    """
    ix = np.minimum((np.asarray(x) / region[0] * GRID_TILES).astype(int), GRID_TILES - 1)
    iy = np.minimum((np.asarray(y) / region[1] * GRID_TILES).astype(int), GRID_TILES - 1)
    return ix * GRID_TILES + iy


def empirical_rate_grid(day_col, hours, ox, oy, dx, dy, n_days: int):
    """Per-day empirical intensities from generated orders.

    order_rates[src, dst, hour] is the mean number of trips per day from the
    src tile to the dst tile departing in that hour. driver_rates is the
    outgoing row sum: driver supply activates where demand originates.
    """
    n_tiles = GRID_TILES * GRID_TILES
    order_rates = np.zeros((n_tiles, n_tiles, GRID_HOURS))
    src = tile_index(ox, oy)
    dst = tile_index(dx, dy)
    hour = np.minimum(np.asarray(hours).astype(int), GRID_HOURS - 1)
    np.add.at(order_rates, (src, dst, hour), 1.0)
    order_rates /= float(n_days)
    return order_rates, order_rates.sum(axis=1)


def gen_synthetic_historical(seed: int, days: int = 30, daily_orders: float = 2000.0,
                             out_dir=".", keep_fraction: float = 1.0,
                             spots=DEFAULT_SPOTS):
    """Write an order CSV and its matching rate grid; returns the two paths.

    keep_fraction thins the stream by an independent coin flip per order, for
    building reduced-load variants of the same city. The grid is computed
    from the rows that survive, so the two files always agree. Fixed inputs
    give byte-identical outputs.
    """
    if days < 1:
        raise ValueError("days must be at least 1")
    if daily_orders <= 0:
        raise ValueError("daily_orders must be positive")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    if not spots:
        raise ValueError("need at least one hot spot")

    rng = np.random.default_rng([int(seed)])
    day_col, hours, ox, oy, dx, dy = [], [], [], [], [], []
    for day in range(1, days + 1):
        h, a, b, c, d = _sample_day(rng, spots, daily_orders)
        if keep_fraction < 1.0:
            keep = rng.random(len(h)) < keep_fraction
            h, a, b, c, d = h[keep], a[keep], b[keep], c[keep], d[keep]
        order = np.argsort(h, kind="stable")
        day_col.append(np.full(len(h), day))
        hours.append(h[order])
        ox.append(a[order])
        oy.append(b[order])
        dx.append(c[order])
        dy.append(d[order])
    day_col, hours, ox, oy, dx, dy = (np.concatenate(v) for v in
                                      (day_col, hours, ox, oy, dx, dy))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    orders_path = out_dir / ORDERS_FILENAME
    with open(orders_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(len(hours)):
            writer.writerow([int(day_col[i]), f"{hours[i] * 3600.0:.3f}",
                             f"{ox[i]:.6f}", f"{oy[i]:.6f}",
                             f"{dx[i]:.6f}", f"{dy[i]:.6f}"])

    order_rates, driver_rates = empirical_rate_grid(day_col, hours, ox, oy, dx, dy, days)
    rates_path = out_dir / RATES_FILENAME
    write_blob(rates_path, RATE_GRID_KIND,
               {"order_rates": order_rates, "driver_rates": driver_rates},
               meta={"seed": int(seed), "days": int(days),
                     "daily_orders": float(daily_orders),
                     "keep_fraction": float(keep_fraction)})
    return orders_path, rates_path
