import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetlab import nn


def max_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / scale))


def flat_view(layers, prefix="mlp"):
    """Pack layer params into a flat vector and rebind the layers onto views."""
    named = []
    for i, layer in enumerate(layers):
        named.append((f"{prefix}.{i}.w", layer.w))
        named.append((f"{prefix}.{i}.b", layer.b))
    flat, layout = nn.flatten_params(named)
    views = nn.unflatten_params(flat, layout)
    for i, layer in enumerate(layers):
        layer.w = views[f"{prefix}.{i}.w"]
        layer.b = views[f"{prefix}.{i}.b"]
    return flat, layout


def flatten_grads(grads):
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])


class TestMlpGradients:
    @pytest.mark.parametrize(
        "sizes,acts",
        [
            ((6, 128, 1), ("relu", None)),
            ((6, 128, 128), ("relu", "relu")),
            ((128, 128, 1), ("tanh", "sigmoid")),
            ((9, 16, 5), ("relu", None)),
        ],
    )
    def test_backward_matches_central_differences(self, sizes, acts):
        # resample until no relu preactivation sits within 10*h of its kink,
        # otherwise the central-difference oracle itself is invalid there
        for attempt in range(20):
            rng = np.random.default_rng(17 + 1000 * attempt)
            layers = nn.mlp_init(sizes, acts, rng)
            flat, _ = flat_view(layers)
            x = rng.normal(size=(4, sizes[0]))
            w_out = rng.normal(size=(4, sizes[-1]))
            _, cache = nn.mlp_forward(layers, x)
            margin = min(
                (np.abs(z).min() for (_, z, _), l in zip(cache, layers) if l.act == "relu"),
                default=1.0,
            )
            if margin > 1e-4:
                break
        else:
            pytest.fail("no kink-free sample found")

        y, cache = nn.mlp_forward(layers, x)
        grads, _ = nn.mlp_backward(layers, cache, w_out.copy())
        analytic = flatten_grads(grads)

        def loss():
            out, _ = nn.mlp_forward(layers, x)
            return float((out * w_out).sum())

        fd = nn.fd_gradient(loss, flat)
        assert max_rel_err(analytic, fd) < 1e-4

    def test_backward_input_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        layers = nn.mlp_init((5, 16, 3), ("tanh", None), rng)
        x = rng.normal(size=(2, 5))
        w_out = rng.normal(size=(2, 3))
        _, cache = nn.mlp_forward(layers, x)
        _, dx = nn.mlp_backward(layers, cache, w_out.copy())

        xflat = x.reshape(-1)

        def loss():
            out, _ = nn.mlp_forward(layers, xflat.reshape(2, 5))
            return float((out * w_out).sum())

        fd = nn.fd_gradient(loss, xflat)
        assert max_rel_err(dx.reshape(-1), fd) < 1e-4

    def test_backward_accumulates_into_given_grads(self):
        rng = np.random.default_rng(5)
        layers = nn.mlp_init((4, 8, 2), ("relu", None), rng)
        x = rng.normal(size=(3, 4))
        _, cache = nn.mlp_forward(layers, x)
        dy = rng.normal(size=(3, 2))
        grads = nn.mlp_grads_like(layers)
        nn.mlp_backward(layers, cache, dy, grads)
        once = flatten_grads(grads)
        nn.mlp_backward(layers, cache, dy, grads)
        np.testing.assert_allclose(flatten_grads(grads), 2.0 * once, rtol=1e-12)

    def test_forward_single_row_equals_batch_row(self):
        rng = np.random.default_rng(11)
        layers = nn.mlp_init((6, 12, 4), ("relu", None), rng)
        x = rng.normal(size=(5, 6))
        y_batch, _ = nn.mlp_forward(layers, x)
        for i in range(5):
            # blas may pick different kernels per batch shape, so equality
            # here is to rounding, not bitwise
            y_one, _ = nn.mlp_forward(layers, x[i : i + 1])
            np.testing.assert_allclose(y_one[0], y_batch[i], rtol=1e-12, atol=1e-15)


class TestGlorotInit:
    def test_bounds_and_bias(self):
        rng = np.random.default_rng(0)
        layers = nn.mlp_init((6, 128, 128), ("relu", "relu"), rng)
        limit0 = np.sqrt(6.0 / (6 + 128))
        assert np.all(np.abs(layers[0].w) <= limit0)
        assert np.abs(layers[0].w).max() > 0.5 * limit0
        assert np.all(layers[0].b == 0.0)
        limit1 = np.sqrt(6.0 / (128 + 128))
        assert np.all(np.abs(layers[1].w) <= limit1)


class TestAdam:
    def test_first_step_closed_form(self):
        # from zero state the bias-corrected step is lr * g / (|g| + eps)
        rng = np.random.default_rng(2)
        theta0 = rng.normal(size=50)
        g = rng.normal(size=50)
        theta = theta0.copy()
        opt = nn.Adam(50, lr=1e-3)
        opt.step(theta, g)
        expected = -1e-3 * g / (np.sqrt(g * g) + 1e-8)
        np.testing.assert_allclose(theta - theta0, expected, rtol=1e-12, atol=0)

    def test_zero_grad_fresh_state_moves_nothing(self):
        theta = np.ones(10)
        opt = nn.Adam(10, lr=0.1)
        opt.step(theta, np.zeros(10))
        np.testing.assert_array_equal(theta, np.ones(10))

    def test_state_round_trip(self):
        rng = np.random.default_rng(9)
        theta = rng.normal(size=20)
        opt = nn.Adam(20, lr=1e-2)
        for _ in range(5):
            opt.step(theta, rng.normal(size=20))
        other = nn.Adam(20, lr=1e-2)
        other.load_state(opt.state_arrays())
        t1, t2 = theta.copy(), theta.copy()
        g = rng.normal(size=20)
        opt.step(t1, g)
        other.step(t2, g)
        np.testing.assert_array_equal(t1, t2)


class TestFlattenRoundTrip:
    def test_bit_exact(self):
        rng = np.random.default_rng(1)
        named = [("a.w", rng.normal(size=(6, 128))), ("a.b", rng.normal(size=128)),
                 ("head", rng.normal(size=(128, 1)))]
        originals = [arr.copy() for _, arr in named]
        flat, layout = nn.flatten_params(named)
        views = nn.unflatten_params(flat, layout)
        for (name, _), orig in zip(named, originals):
            np.testing.assert_array_equal(views[name], orig)

    @given(st.integers(0, 2**32 - 1), st.lists(st.tuples(st.integers(1, 7), st.integers(1, 7)), min_size=1, max_size=5))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed, shapes):
        rng = np.random.default_rng(seed)
        named = [(f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]
        originals = [arr.copy() for _, arr in named]
        flat, layout = nn.flatten_params(named)
        views = nn.unflatten_params(flat, layout)
        for (name, _), orig in zip(named, originals):
            np.testing.assert_array_equal(views[name], orig)

    def test_views_alias_flat(self):
        named = [("x", np.zeros(4))]
        flat, layout = nn.flatten_params(named)
        views = nn.unflatten_params(flat, layout)
        flat[:] = 7.0
        np.testing.assert_array_equal(views["x"], np.full(4, 7.0))


class TestCheckpoint:
    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        named = [("emb.w", rng.normal(size=(6, 32))), ("emb.b", rng.normal(size=32))]
        flat, layout = nn.flatten_params(named)
        path = tmp_path / "params.flp"
        nn.save_params(path, flat, layout, meta={"note": "test"},
                       extra={"m": rng.normal(size=flat.size)})
        flat2, layout2, meta, extra = nn.load_params(path)
        np.testing.assert_array_equal(flat2, flat)
        assert layout2 == layout
        assert meta == {"note": "test"}
        assert set(extra) == {"m"}

    def test_float32_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        named = [("w", rng.normal(size=(8, 8)).astype(np.float32))]
        flat, layout = nn.flatten_params(named)
        path = tmp_path / "p32.flp"
        nn.save_params(path, flat, layout)
        flat2, _, _, _ = nn.load_params(path)
        assert flat2.dtype == np.float32
        np.testing.assert_array_equal(flat2, flat)

    def test_rejects_non_checkpoint_file(self, tmp_path):
        path = tmp_path / "bogus.flp"
        path.write_bytes(b"not a blob at all")
        with pytest.raises(ValueError):
            nn.load_params(path)


class TestSoftmax:
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=10.0, size=n)
        p = nn.softmax(x)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=5.0, size=13)
        shift = rng.normal(scale=100.0)
        np.testing.assert_allclose(nn.softmax(x + shift), nn.softmax(x), atol=1e-9)

    def test_log_softmax_consistency(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 9))
        np.testing.assert_allclose(np.exp(nn.log_softmax(x, axis=1)), nn.softmax(x, axis=1), atol=1e-12)

    def test_extreme_scores_stay_finite(self):
        x = np.array([1e4, -1e4, 0.0])
        p = nn.softmax(x)
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-12
