"""Shared test helpers: synthetic observations and tiny scripted scenarios."""

import numpy as np

from fleetlab.engine import DriverSpec, OrderSpec, Scenario, SimConfig
from fleetlab.features import ASSIGN, REPOSITION, ActionSet, Observation


class FixedOrders:
    def __init__(self, *specs):
        self.specs = list(specs)

    def sample_orders(self, cfg, rng):
        return list(self.specs)


class FixedDrivers:
    def __init__(self, *specs):
        self.specs = list(specs)

    def sample_drivers(self, cfg, rng):
        return list(self.specs)


def scripted(orders=(), drivers=((0.0, (0.5, 0.5)),), **cfg_kwargs):
    """A scenario with a fixed order/driver script and noise-free movement."""
    cfg_kwargs.setdefault("reposition_noise", 0.0)
    cfg = SimConfig(**cfg_kwargs)
    return Scenario(
        cfg,
        FixedOrders(*[OrderSpec(*o) for o in orders]),
        FixedDrivers(*[DriverSpec(*d) for d in drivers]),
    )


def relu_margin(net, cache):
    """Smallest |pre-activation| over all ReLU layers in a forward cache.

    Central differences are unreliable when a ReLU sits within h of its kink,
    so gradcheck configs below this margin are resampled.
    """
    kind = cache.obs.action_set.kind
    named = [("order_emb", cache.ce), ("driver_emb", cache.de),
             ("assign" if kind == ASSIGN else "repo", cache.head_cache),
             ("critic", cache.value_cache)]
    m = np.inf
    for name, mlp_cache in named:
        if mlp_cache is None or name not in net.blocks:
            continue
        for layer, (_, z, _) in zip(net.blocks[name], mlp_cache):
            if layer.act == "relu" and z.size:
                m = min(m, float(np.abs(z).min()))
    return m


def random_obs(rng, n_orders, n_drivers, kind=None, duplicate_rows=False):
    """A synthetic observation with random feature rows; not tied to any
    engine state, which keeps network-level tests independent of the
    simulator."""
    orders = rng.uniform(0.0, 1.0, size=(n_orders, 6))
    if duplicate_rows and n_orders >= 2:
        orders[-1] = orders[0]
    drivers = rng.uniform(0.0, 1.0, size=(n_drivers, 6))
    if kind is None:
        kind = ASSIGN if n_orders and rng.random() < 0.5 else REPOSITION
    if kind == ASSIGN:
        k = int(rng.integers(1, n_orders + 1))
        rows = rng.choice(n_orders, size=k, replace=False).astype(np.int64)
        aset = ActionSet(ASSIGN, rows)
    else:
        aset = ActionSet(REPOSITION)
    return Observation(
        time=float(rng.random()),
        time_norm=float(rng.random()),
        drivers=drivers,
        orders=orders,
        selected_index=int(rng.integers(n_drivers)),
        action_set=aset,
        driver_ids=np.arange(n_drivers, dtype=np.int64),
        order_ids=np.arange(n_orders, dtype=np.int64),
    )
