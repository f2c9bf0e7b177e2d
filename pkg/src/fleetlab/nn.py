"""Minimal dense-network kernel on numpy: explicit forward/backward passes,
Adam, and flat parameter vectors with named layouts.

Everything here is deliberately plain. Layers act on row batches (y = x @ w
+ b), gradients are hand-derived, and all parameters of a model live in one
flat vector that individual layers view into. That keeps the optimizer a
single vector operation and makes checkpoints trivial to freeze.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import read_blob, write_blob

Array = np.ndarray

# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass
class Dense:
    """One affine layer with an optional elementwise activation."""

    w: Array  # (n_in, n_out)
    b: Array  # (n_out,)
    act: str | None = None  # relu | tanh | sigmoid | None


def glorot_uniform(n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64) -> Array:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)


def mlp_init(sizes, acts, rng: np.random.Generator, dtype=np.float64) -> list[Dense]:
    """Build a stack of Dense layers.

    sizes has one more entry than acts: sizes = (n_in, h1, ..., n_out),
    acts[i] is the activation applied after layer i (None for linear).
    """
    if len(acts) != len(sizes) - 1:
        raise ValueError("need one activation entry per layer")
    layers = []
    for i, act in enumerate(acts):
        w = glorot_uniform(sizes[i], sizes[i + 1], rng, dtype)
        b = np.zeros(sizes[i + 1], dtype=dtype)
        layers.append(Dense(w, b, act))
    return layers


def _activate(z: Array, act: str | None) -> Array:
    if act is None:
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        # clip keeps exp() finite; outside +-500 the result saturates anyway
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))
    raise ValueError(f"unknown activation {act!r}")


def mlp_forward(layers: list[Dense], x: Array):
    """Run the stack on a (batch, n_in) array.

    Returns (y, cache); cache holds per-layer inputs and outputs for the
    backward pass.
    """
    cache = []
    for layer in layers:
        z = x @ layer.w
        z += layer.b
        a = _activate(z, layer.act)
        cache.append((x, z, a))
        x = a
    return x, cache


def mlp_grads_like(layers: list[Dense]) -> list[tuple[Array, Array]]:
    return [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in layers]


def mlp_backward(layers: list[Dense], cache, dy: Array, grads=None):
    """Backpropagate dy through the stack.

    Accumulates parameter gradients into grads (a fresh list is allocated
    when None) and returns (grads, dx) where dx is the gradient with respect
    to the stack input.
    """
    if grads is None:
        grads = mlp_grads_like(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x, z, a = cache[i]
        if layer.act is None:
            dz = dy
        elif layer.act == "relu":
            dz = dy * (z > 0)
        elif layer.act == "tanh":
            dz = dy * (1.0 - a * a)
        elif layer.act == "sigmoid":
            dz = dy * a * (1.0 - a)
        else:
            raise ValueError(f"unknown activation {layer.act!r}")
        gw, gb = grads[i]
        gw += x.T @ dz
        gb += dz.sum(axis=0)
        dy = dz @ layer.w.T
    return grads, dy


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(x: Array, axis: int = -1) -> Array:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Array, axis: int = -1) -> Array:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Names, shapes and offsets of the pieces packed into a flat vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    size: int

    def to_meta(self) -> dict:
        return {"names": list(self.names), "shapes": [list(s) for s in self.shapes]}

    @staticmethod
    def from_meta(meta: dict) -> "ParamLayout":
        shapes = tuple(tuple(s) for s in meta["shapes"])
        return _layout_from_shapes(tuple(meta["names"]), shapes)


def _layout_from_shapes(names, shapes) -> ParamLayout:
    offsets = []
    off = 0
    for s in shapes:
        offsets.append(off)
        off += int(np.prod(s)) if s else 1
    return ParamLayout(tuple(names), tuple(shapes), tuple(offsets), off)


def flatten_params(named: list[tuple[str, Array]], dtype=None):
    """Pack (name, array) pairs into one flat vector.

    Returns (flat, layout). Order follows the input list and is part of the
    layout, so round trips are exact.
    """
    names = tuple(n for n, _ in named)
    shapes = tuple(a.shape for _, a in named)
    layout = _layout_from_shapes(names, shapes)
    if dtype is None:
        dtype = named[0][1].dtype if named else np.float64
    flat = np.empty(layout.size, dtype=dtype)
    for (name, arr), off, shape in zip(named, layout.offsets, layout.shapes):
        n = int(np.prod(shape)) if shape else 1
        flat[off : off + n] = arr.reshape(-1)
    return flat, layout


def unflatten_params(flat: Array, layout: ParamLayout) -> dict[str, Array]:
    """Views into flat, keyed by name. Mutating flat mutates the views."""
    out = {}
    for name, off, shape in zip(layout.names, layout.offsets, layout.shapes):
        n = int(np.prod(shape)) if shape else 1
        out[name] = flat[off : off + n].reshape(shape)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction, updating a flat parameter vector in place.

    The epsilon sits outside the square root: step = lr * m_hat /
    (sqrt(v_hat) + eps).
    """

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, dtype=np.float64):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self._scratch = np.empty(size, dtype=dtype)

    def step(self, theta: Array, grad: Array) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        s = self._scratch
        self.m *= b1
        np.multiply(grad, 1.0 - b1, out=s)
        self.m += s
        self.v *= b2
        np.multiply(grad, grad, out=s)
        s *= 1.0 - b2
        self.v += s
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        np.divide(self.v, bc2, out=s)
        np.sqrt(s, out=s)
        s += self.eps
        np.divide(self.m, s, out=s)
        s *= self.lr / bc1
        theta -= s

    def state_arrays(self) -> dict[str, Array]:
        return {"m": self.m, "v": self.v, "t": np.array([self.t], dtype=np.int64)}

    def load_state(self, arrays: dict[str, Array]) -> None:
        self.m[:] = arrays["m"]
        self.v[:] = arrays["v"]
        self.t = int(arrays["t"][0])


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def fd_gradient(f, theta: Array, indices=None, h: float = 1e-5) -> Array:
    """Central-difference derivative estimates of scalar f at theta.

    Only the given flat indices are probed (all of them when indices is
    None). theta is restored exactly after each probe.
    """
    indices = list(range(theta.size)) if indices is None else list(indices)
    out = np.empty(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = theta[i]
        theta[i] = orig + h
        fp = f()
        theta[i] = orig - h
        fm = f()
        theta[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def fd_directional(f, theta: Array, direction: Array, h: float = 1e-5) -> float:
    """Central-difference directional derivative along a fixed direction."""
    orig = theta.copy()
    theta += h * direction
    fp = f()
    theta[:] = orig
    theta -= h * direction
    fm = f()
    theta[:] = orig
    return (fp - fm) / (2.0 * h)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KIND = "fleetlab-params"


def save_params(path, flat: Array, layout: ParamLayout, meta: dict | None = None,
                extra: dict[str, Array] | None = None) -> None:
    """Freeze a flat parameter vector (plus optional optimizer state) to disk."""
    arrays = {"flat": flat}
    if extra:
        for name, arr in extra.items():
            arrays["extra." + name] = arr
    header_meta = {"layout": layout.to_meta(), "user": meta or {}}
    write_blob(path, CHECKPOINT_KIND, arrays, header_meta)


def load_params(path):
    """Returns (flat, layout, meta, extra). Bit-exact inverse of save_params."""
    _, arrays, header_meta = read_blob(path, expect_kind=CHECKPOINT_KIND)
    layout = ParamLayout.from_meta(header_meta["layout"])
    flat = arrays.pop("flat")
    if flat.size != layout.size:
        raise ValueError(f"{path}: flat vector size {flat.size} does not match layout {layout.size}")
    extra = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    return flat, layout, header_meta.get("user", {}), extra
