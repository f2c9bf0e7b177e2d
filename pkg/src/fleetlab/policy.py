"""Set-pooling policy over variable numbers of orders and drivers.

Each order and driver row is embedded by its own two-layer MLP; a sigmoid
gate (one scalar per entity) weights the embeddings, whose sums form a
fixed-size context alongside the selected driver's embedding and the episode
clock. Per-order assignment scores and the nine repositioning scores come
from small heads over that context; an optional critic head provides state
values.

Two evaluation paths exist. The single-observation path sorts both entity
matrices into a canonical row order before any matrix product, so every
intermediate (and hence every output) is bit-identical under permutations
of the input rows; BLAS kernels are not row-order-stable on their own. The
batched path trades that for speed across many observations; both share the
same exact analytic backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .features import ASSIGN, DRIVER_DIM, N_REPO_ACTIONS, ORDER_DIM, Observation
from .util import repeat_per_segment, segment_bounds, segment_sum

EMBED_DIM = 128
HEAD_HIDDEN = 64
CONTEXT_DIM = 3 * EMBED_DIM + 1  # pooled orders | pooled drivers | selected | clock

_BLOCKS = ("order_emb", "order_w", "driver_emb", "driver_w", "assign", "repo", "critic")


def _arch(with_critic: bool) -> dict[str, tuple[tuple[int, ...], tuple]]:
    arch = {
        "order_emb": ((ORDER_DIM, EMBED_DIM, EMBED_DIM), ("relu", "relu")),
        "order_w": ((EMBED_DIM, EMBED_DIM, 1), ("tanh", "sigmoid")),
        "driver_emb": ((DRIVER_DIM, EMBED_DIM, EMBED_DIM), ("relu", "relu")),
        "driver_w": ((EMBED_DIM, EMBED_DIM, 1), ("tanh", "sigmoid")),
        "assign": ((CONTEXT_DIM + EMBED_DIM, HEAD_HIDDEN, 1), ("relu", None)),
        "repo": ((CONTEXT_DIM, HEAD_HIDDEN, N_REPO_ACTIONS), ("relu", None)),
    }
    if with_critic:
        arch["critic"] = ((CONTEXT_DIM, HEAD_HIDDEN, 1), ("relu", None))
    return arch


@dataclass
class PolicyNet:
    flat: np.ndarray
    layout: nn.ParamLayout
    blocks: dict[str, list[nn.Dense]]
    with_critic: bool
    dtype: np.dtype

    def clone(self) -> "PolicyNet":
        """Deep copy; used for frozen target networks."""
        other = _net_from_flat(self.flat.copy(), self.layout, self.with_critic, self.dtype)
        return other

    def copy_from(self, other: "PolicyNet") -> None:
        self.flat[:] = other.flat


@dataclass
class PolicyGrads:
    flat: np.ndarray
    blocks: dict[str, list[tuple[np.ndarray, np.ndarray]]]

    def zero(self) -> None:
        self.flat[:] = 0.0


def _bind_views(flat, layout, with_critic):
    views = nn.unflatten_params(flat, layout)
    arch = _arch(with_critic)
    blocks = {}
    for name, (sizes, acts) in arch.items():
        layers = []
        for i, act in enumerate(acts):
            layers.append(nn.Dense(views[f"{name}.{i}.w"], views[f"{name}.{i}.b"], act))
        blocks[name] = layers
    return blocks


def _net_from_flat(flat, layout, with_critic, dtype) -> PolicyNet:
    return PolicyNet(flat, layout, _bind_views(flat, layout, with_critic), with_critic, np.dtype(dtype))


def build_policy(rng: np.random.Generator, with_critic: bool = False, dtype=np.float64) -> PolicyNet:
    arch = _arch(with_critic)
    named = []
    for name, (sizes, acts) in arch.items():
        layers = nn.mlp_init(sizes, acts, rng, dtype)
        for i, layer in enumerate(layers):
            named.append((f"{name}.{i}.w", layer.w))
            named.append((f"{name}.{i}.b", layer.b))
    flat, layout = nn.flatten_params(named, dtype=dtype)
    return _net_from_flat(flat, layout, with_critic, dtype)


def grads_like(net: PolicyNet) -> PolicyGrads:
    flat = np.zeros(net.layout.size, dtype=net.dtype)
    views = nn.unflatten_params(flat, net.layout)
    blocks = {}
    for name, layers in net.blocks.items():
        blocks[name] = [(views[f"{name}.{i}.w"], views[f"{name}.{i}.b"]) for i in range(len(layers))]
    return PolicyGrads(flat, blocks)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_policy(path, net: PolicyNet, meta: Optional[dict] = None,
                extra: Optional[dict[str, np.ndarray]] = None) -> None:
    info = {"critic": net.with_critic, "dtype": net.dtype.str}
    info.update(meta or {})
    nn.save_params(path, net.flat, net.layout, meta=info, extra=extra)


def load_policy(path):
    """Returns (net, meta, extra). The stored layout must match the
    architecture exactly."""
    flat, layout, meta, extra = nn.load_params(path)
    with_critic = bool(meta.get("critic", False))
    expected = build_policy(np.random.default_rng(0), with_critic, flat.dtype)
    if layout != expected.layout:
        raise ValueError(f"{path}: stored parameter layout does not match this architecture")
    return _net_from_flat(flat, layout, with_critic, flat.dtype), meta, extra


# ---------------------------------------------------------------------------
# single-observation forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    obs: Observation
    perm_o: np.ndarray  # canonical row order of the orders matrix
    ce: Optional[list]  # order embed cache (canonical order)
    cw: Optional[list]
    nu_o: Optional[np.ndarray]
    alpha_o: Optional[np.ndarray]
    de: list  # driver embed cache (canonical order)
    dw: list
    nu_d: np.ndarray
    alpha_d: np.ndarray
    sel_canon: int  # canonical row of the selected driver
    ctx: np.ndarray
    head_cache: list
    assign_sorted: Optional[np.ndarray]  # positions of action entries in canonical order
    value_cache: Optional[list] = None


@dataclass
class PolicyOut:
    scores: np.ndarray
    value: Optional[float] = None
    cache: Optional[ForwardCache] = None


def forward(net: PolicyNet, obs: Observation, need_value: bool = False,
            need_cache: bool = False) -> PolicyOut:
    dtype = net.dtype
    orders = np.ascontiguousarray(obs.orders, dtype=dtype)
    drivers = np.ascontiguousarray(obs.drivers, dtype=dtype)
    n = len(orders)

    if n:
        # canonical internal order makes every product independent of row order
        perm_o = np.lexsort(orders.T[::-1])
        po = orders[perm_o]
        nu_o, ce = nn.mlp_forward(net.blocks["order_emb"], po)
        alpha_o, cw = nn.mlp_forward(net.blocks["order_w"], nu_o)
        pooled_o = (alpha_o * nu_o).sum(axis=0)
    else:
        perm_o = np.zeros(0, dtype=np.int64)
        nu_o = ce = cw = alpha_o = None
        pooled_o = np.zeros(EMBED_DIM, dtype=dtype)

    perm_d = np.lexsort(drivers.T[::-1])
    inv_d = np.empty(len(drivers), dtype=np.int64)
    inv_d[perm_d] = np.arange(len(drivers))
    sel_canon = int(inv_d[obs.selected_index])
    nu_d, de = nn.mlp_forward(net.blocks["driver_emb"], drivers[perm_d])
    alpha_d, dw = nn.mlp_forward(net.blocks["driver_w"], nu_d)
    pooled_d = (alpha_d * nu_d).sum(axis=0)

    ctx = np.empty(CONTEXT_DIM, dtype=dtype)
    ctx[:EMBED_DIM] = pooled_o
    ctx[EMBED_DIM : 2 * EMBED_DIM] = pooled_d
    ctx[2 * EMBED_DIM : 3 * EMBED_DIM] = nu_d[sel_canon]
    ctx[-1] = obs.time_norm

    aset = obs.action_set
    assign_sorted = None
    if aset.kind == ASSIGN:
        inv = np.empty(n, dtype=np.int64)
        inv[perm_o] = np.arange(n)
        canon_pos = inv[aset.order_rows]
        assign_sorted = np.argsort(canon_pos)
        rows = canon_pos[assign_sorted]
        x = np.empty((len(rows), CONTEXT_DIM + EMBED_DIM), dtype=dtype)
        x[:, :CONTEXT_DIM] = ctx
        x[:, CONTEXT_DIM:] = nu_o[rows]
        s, head_cache = nn.mlp_forward(net.blocks["assign"], x)
        scores = np.empty(len(rows), dtype=dtype)
        scores[assign_sorted] = s[:, 0]
    else:
        s, head_cache = nn.mlp_forward(net.blocks["repo"], ctx[None, :])
        scores = s[0]

    value = None
    value_cache = None
    if need_value:
        if not net.with_critic:
            raise ValueError("this policy was built without a critic head")
        v, value_cache = nn.mlp_forward(net.blocks["critic"], ctx[None, :])
        value = float(v[0, 0])

    cache = None
    if need_cache:
        cache = ForwardCache(obs, perm_o, ce, cw, nu_o, alpha_o, de, dw, nu_d, alpha_d,
                             sel_canon, ctx, head_cache, assign_sorted, value_cache)
    return PolicyOut(scores, value, cache)


def backward(net: PolicyNet, cache: ForwardCache, d_scores: np.ndarray,
             grads: PolicyGrads, d_value: float = 0.0) -> None:
    """Accumulate parameter gradients for upstream score/value gradients.

    d_scores is aligned with the forward scores (one entry per action);
    d_value scales the critic path and may be zero.
    """
    obs = cache.obs
    dtype = net.dtype
    d_ctx = np.zeros(CONTEXT_DIM, dtype=dtype)
    d_nu_o_extra = None

    if obs.action_set.kind == ASSIGN:
        ds = np.asarray(d_scores, dtype=dtype)[cache.assign_sorted][:, None]
        _, dx = nn.mlp_backward(net.blocks["assign"], cache.head_cache, ds, grads.blocks["assign"])
        d_ctx += dx[:, :CONTEXT_DIM].sum(axis=0)
        n = len(cache.obs.orders)
        inv = np.empty(n, dtype=np.int64)
        inv[cache.perm_o] = np.arange(n)
        rows = inv[obs.action_set.order_rows][cache.assign_sorted]
        d_nu_o_extra = np.zeros((n, EMBED_DIM), dtype=dtype)
        d_nu_o_extra[rows] += dx[:, CONTEXT_DIM:]
    else:
        ds = np.asarray(d_scores, dtype=dtype)[None, :]
        _, dx = nn.mlp_backward(net.blocks["repo"], cache.head_cache, ds, grads.blocks["repo"])
        d_ctx += dx[0]

    if d_value != 0.0:
        _, dxv = nn.mlp_backward(net.blocks["critic"], cache.value_cache,
                                 np.array([[d_value]], dtype=dtype), grads.blocks["critic"])
        d_ctx += dxv[0]

    d_pool_o = d_ctx[:EMBED_DIM]
    d_pool_d = d_ctx[EMBED_DIM : 2 * EMBED_DIM]
    d_sel = d_ctx[2 * EMBED_DIM : 3 * EMBED_DIM]

    # drivers: pooled sum plus the selected driver's direct context entry
    d_nu_d = cache.alpha_d * d_pool_d[None, :]
    d_alpha_d = cache.nu_d @ d_pool_d
    d_nu_d[cache.sel_canon] += d_sel
    _, dnw = nn.mlp_backward(net.blocks["driver_w"], cache.dw, d_alpha_d[:, None],
                             grads.blocks["driver_w"])
    d_nu_d = d_nu_d + dnw
    nn.mlp_backward(net.blocks["driver_emb"], cache.de, d_nu_d, grads.blocks["driver_emb"])

    if cache.nu_o is not None:
        d_nu_o = cache.alpha_o * d_pool_o[None, :]
        if d_nu_o_extra is not None:
            d_nu_o = d_nu_o + d_nu_o_extra
        d_alpha_o = cache.nu_o @ d_pool_o
        _, dow = nn.mlp_backward(net.blocks["order_w"], cache.cw, d_alpha_o[:, None],
                                 grads.blocks["order_w"])
        d_nu_o = d_nu_o + dow
        nn.mlp_backward(net.blocks["order_emb"], cache.ce, d_nu_o, grads.blocks["order_emb"])


# ---------------------------------------------------------------------------
# batched forward / backward over packed observations
# ---------------------------------------------------------------------------


@dataclass
class ObsPack:
    """Concatenated rows of a list of observations, ready for batched passes."""

    n: int
    orders: np.ndarray  # (Ro, ORDER_DIM)
    order_bounds: np.ndarray  # (n + 1,)
    drivers: np.ndarray  # (Rd, DRIVER_DIM)
    driver_bounds: np.ndarray
    sel_rows: np.ndarray  # (n,) global driver-row index of the selected driver
    t_norm: np.ndarray  # (n,)
    assign_samples: np.ndarray  # sample indices with an assign action set
    repo_samples: np.ndarray
    assign_rows: np.ndarray  # (Ra,) global order-row indices, concatenated
    assign_bounds: np.ndarray  # (len(assign_samples) + 1,)


def pack_observations(obs_list: list[Observation], dtype=np.float64) -> ObsPack:
    n = len(obs_list)
    o_sizes = [len(o.orders) for o in obs_list]
    d_sizes = [len(o.drivers) for o in obs_list]
    ob = segment_bounds(o_sizes)
    db = segment_bounds(d_sizes)
    orders = (
        np.concatenate([o.orders for o in obs_list], axis=0).astype(dtype, copy=False)
        if sum(o_sizes)
        else np.zeros((0, ORDER_DIM), dtype=dtype)
    )
    drivers = np.concatenate([o.drivers for o in obs_list], axis=0).astype(dtype, copy=False)
    sel_rows = np.array([db[i] + o.selected_index for i, o in enumerate(obs_list)], dtype=np.int64)
    t_norm = np.array([o.time_norm for o in obs_list], dtype=dtype)
    assign_samples, repo_samples, assign_rows, assign_sizes = [], [], [], []
    for i, o in enumerate(obs_list):
        if o.action_set.kind == ASSIGN:
            assign_samples.append(i)
            assign_rows.append(ob[i] + np.asarray(o.action_set.order_rows, dtype=np.int64))
            assign_sizes.append(len(o.action_set.order_rows))
        else:
            repo_samples.append(i)
    return ObsPack(
        n=n,
        orders=orders,
        order_bounds=ob,
        drivers=drivers,
        driver_bounds=db,
        sel_rows=sel_rows,
        t_norm=t_norm,
        assign_samples=np.array(assign_samples, dtype=np.int64),
        repo_samples=np.array(repo_samples, dtype=np.int64),
        assign_rows=np.concatenate(assign_rows) if assign_rows else np.zeros(0, dtype=np.int64),
        assign_bounds=segment_bounds(assign_sizes),
    )


@dataclass
class BatchCache:
    pack: ObsPack
    ce: Optional[list]
    cw: Optional[list]
    nu_o: Optional[np.ndarray]
    alpha_o: Optional[np.ndarray]
    de: list
    dw: list
    nu_d: np.ndarray
    alpha_d: np.ndarray
    ctx: np.ndarray  # (n, CONTEXT_DIM)
    assign_cache: Optional[list]
    repo_cache: Optional[list]
    value_cache: Optional[list]


@dataclass
class BatchOut:
    assign_scores: np.ndarray  # (Ra,) aligned with pack.assign_rows
    repo_scores: np.ndarray  # (len(repo_samples), N_REPO_ACTIONS)
    values: Optional[np.ndarray]  # (n,)
    cache: Optional[BatchCache] = None


def forward_batch(net: PolicyNet, pack: ObsPack, need_value: bool = False,
                  need_cache: bool = False) -> BatchOut:
    dtype = net.dtype
    if len(pack.orders):
        nu_o, ce = nn.mlp_forward(net.blocks["order_emb"], pack.orders)
        alpha_o, cw = nn.mlp_forward(net.blocks["order_w"], nu_o)
        pooled_o = segment_sum(alpha_o * nu_o, pack.order_bounds)
    else:
        nu_o = ce = cw = alpha_o = None
        pooled_o = np.zeros((pack.n, EMBED_DIM), dtype=dtype)
    nu_d, de = nn.mlp_forward(net.blocks["driver_emb"], pack.drivers)
    alpha_d, dw = nn.mlp_forward(net.blocks["driver_w"], nu_d)
    pooled_d = segment_sum(alpha_d * nu_d, pack.driver_bounds)

    ctx = np.empty((pack.n, CONTEXT_DIM), dtype=dtype)
    ctx[:, :EMBED_DIM] = pooled_o
    ctx[:, EMBED_DIM : 2 * EMBED_DIM] = pooled_d
    ctx[:, 2 * EMBED_DIM : 3 * EMBED_DIM] = nu_d[pack.sel_rows]
    ctx[:, -1] = pack.t_norm

    assign_scores = np.zeros(len(pack.assign_rows), dtype=dtype)
    assign_cache = None
    if len(pack.assign_rows):
        sizes = np.diff(pack.assign_bounds)
        x = np.empty((len(pack.assign_rows), CONTEXT_DIM + EMBED_DIM), dtype=dtype)
        x[:, :CONTEXT_DIM] = repeat_per_segment(ctx[pack.assign_samples], sizes)
        x[:, CONTEXT_DIM:] = nu_o[pack.assign_rows]
        s, assign_cache = nn.mlp_forward(net.blocks["assign"], x)
        assign_scores = s[:, 0]

    repo_scores = np.zeros((len(pack.repo_samples), N_REPO_ACTIONS), dtype=dtype)
    repo_cache = None
    if len(pack.repo_samples):
        repo_scores, repo_cache = nn.mlp_forward(net.blocks["repo"], ctx[pack.repo_samples])

    values = None
    value_cache = None
    if need_value:
        if not net.with_critic:
            raise ValueError("this policy was built without a critic head")
        v, value_cache = nn.mlp_forward(net.blocks["critic"], ctx)
        values = v[:, 0]

    cache = None
    if need_cache:
        cache = BatchCache(pack, ce, cw, nu_o, alpha_o, de, dw, nu_d, alpha_d, ctx,
                           assign_cache, repo_cache, value_cache)
    return BatchOut(assign_scores, repo_scores, values, cache)


def critic_offset(net: PolicyNet) -> int:
    """Start of the critic block in the flat vector (it occupies the tail),
    so actor and critic parameters can be updated as two disjoint slices."""
    if not net.with_critic:
        raise ValueError("this policy was built without a critic head")
    for name, off in zip(net.layout.names, net.layout.offsets):
        if name.startswith("critic."):
            return int(off)
    raise AssertionError("critic parameters missing from layout")


def backward_batch(net: PolicyNet, cache: BatchCache, grads: PolicyGrads,
                   d_assign: Optional[np.ndarray] = None,
                   d_repo: Optional[np.ndarray] = None,
                   d_values: Optional[np.ndarray] = None,
                   detach_values: bool = False) -> None:
    pack = cache.pack
    dtype = net.dtype
    d_ctx = np.zeros((pack.n, CONTEXT_DIM), dtype=dtype)
    d_nu_o = None
    if cache.nu_o is not None:
        d_nu_o = np.zeros_like(cache.nu_o)

    if d_assign is not None and len(pack.assign_rows):
        _, dx = nn.mlp_backward(net.blocks["assign"], cache.assign_cache,
                                np.asarray(d_assign, dtype=dtype)[:, None], grads.blocks["assign"])
        d_ctx[pack.assign_samples] += segment_sum(dx[:, :CONTEXT_DIM], pack.assign_bounds)
        # a global order row appears in at most one sample's action set
        d_nu_o[pack.assign_rows] += dx[:, CONTEXT_DIM:]

    if d_repo is not None and len(pack.repo_samples):
        _, dx = nn.mlp_backward(net.blocks["repo"], cache.repo_cache,
                                np.asarray(d_repo, dtype=dtype), grads.blocks["repo"])
        d_ctx[pack.repo_samples] += dx

    if d_values is not None:
        _, dx = nn.mlp_backward(net.blocks["critic"], cache.value_cache,
                                np.asarray(d_values, dtype=dtype)[:, None], grads.blocks["critic"])
        if not detach_values:
            d_ctx += dx

    d_pool_o = d_ctx[:, :EMBED_DIM]
    d_pool_d = d_ctx[:, EMBED_DIM : 2 * EMBED_DIM]
    d_sel = d_ctx[:, 2 * EMBED_DIM : 3 * EMBED_DIM]

    d_sizes = np.diff(pack.driver_bounds)
    dpd_rows = repeat_per_segment(d_pool_d, d_sizes)
    d_nu_d = cache.alpha_d * dpd_rows
    d_alpha_d = (cache.nu_d * dpd_rows).sum(axis=1, keepdims=True)
    # selected rows are unique per sample, so fancy-index add is safe
    d_nu_d[pack.sel_rows] += d_sel
    _, dnw = nn.mlp_backward(net.blocks["driver_w"], cache.dw, d_alpha_d, grads.blocks["driver_w"])
    d_nu_d += dnw
    nn.mlp_backward(net.blocks["driver_emb"], cache.de, d_nu_d, grads.blocks["driver_emb"])

    if cache.nu_o is not None and len(pack.orders):
        o_sizes = np.diff(pack.order_bounds)
        dpo_rows = repeat_per_segment(d_pool_o, o_sizes)
        d_nu_o += cache.alpha_o * dpo_rows
        d_alpha_o = (cache.nu_o * dpo_rows).sum(axis=1, keepdims=True)
        _, dow = nn.mlp_backward(net.blocks["order_w"], cache.cw, d_alpha_o, grads.blocks["order_w"])
        d_nu_o += dow
        nn.mlp_backward(net.blocks["order_emb"], cache.ce, d_nu_o, grads.blocks["order_emb"])


# ---------------------------------------------------------------------------
# action selection
# ---------------------------------------------------------------------------


def select_greedy(scores: np.ndarray) -> int:
    """Highest score, lowest index on ties."""
    return int(np.argmax(scores))


def select_epsilon(scores: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(len(scores)))
    return select_greedy(scores)


def sample_categorical(scores: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Sample an action index from softmax(scores); returns (index, log prob)."""
    logp = nn.log_softmax(np.asarray(scores, dtype=np.float64))
    p = np.exp(logp)
    c = np.cumsum(p)
    c[-1] = 1.0
    idx = int(np.searchsorted(c, rng.random(), side="right"))
    idx = min(idx, len(p) - 1)
    return idx, float(logp[idx])
