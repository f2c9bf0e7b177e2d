"""Segment reductions and the binary container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetlab import util


def ragged(draw, allow_empty=True):
    n = draw(st.integers(1, 6))
    low = 0 if allow_empty else 1
    sizes = [draw(st.integers(low, 5)) for _ in range(n)]
    bounds = util.segment_bounds(sizes)
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    x = rng.normal(size=(int(bounds[-1]), 3))
    return x, bounds, sizes


@st.composite
def ragged_batches(draw, allow_empty=True):
    return ragged(draw, allow_empty)


class TestSegmentOps:
    @given(ragged_batches())
    @settings(max_examples=60, deadline=None)
    def test_segment_sum_matches_python_loop(self, batch):
        x, bounds, sizes = batch
        got = util.segment_sum(x, bounds)
        for i in range(len(sizes)):
            want = x[bounds[i] : bounds[i + 1]].sum(axis=0) if sizes[i] else np.zeros(3)
            np.testing.assert_allclose(got[i], want, rtol=1e-12, atol=1e-15)

    def test_segment_sum_empty_segments_are_zero(self):
        x = np.ones((3, 2))
        bounds = np.array([0, 0, 2, 2, 3])
        got = util.segment_sum(x, bounds)
        np.testing.assert_array_equal(got, [[0, 0], [2, 2], [0, 0], [1, 1]])

    @given(ragged_batches(allow_empty=False))
    @settings(max_examples=60, deadline=None)
    def test_segment_max_and_argmax(self, batch):
        x, bounds, sizes = batch
        v = x[:, 0].copy()
        mx = util.segment_max(v, bounds)
        am = util.segment_argmax(v, bounds)
        for i in range(len(sizes)):
            seg = v[bounds[i] : bounds[i + 1]]
            assert mx[i] == seg.max()
            assert am[i] == int(np.argmax(seg))

    def test_segment_max_rejects_empty(self):
        with pytest.raises(ValueError):
            util.segment_max(np.ones(2), np.array([0, 0, 2]))

    @given(ragged_batches(allow_empty=False))
    @settings(max_examples=60, deadline=None)
    def test_segment_log_softmax_normalizes(self, batch):
        x, bounds, sizes = batch
        v = 10.0 * x[:, 0]
        lp = util.segment_log_softmax(v, bounds)
        for i in range(len(sizes)):
            seg = lp[bounds[i] : bounds[i + 1]]
            assert np.exp(seg).sum() == pytest.approx(1.0, abs=1e-12)
            ref = v[bounds[i] : bounds[i + 1]]
            ref = ref - ref.max()
            ref = ref - np.log(np.exp(ref).sum())
            np.testing.assert_allclose(seg, ref, rtol=0, atol=1e-12)

    def test_log_softmax_extreme_scores_stay_finite(self):
        v = np.array([1000.0, 0.0, -1000.0, 3.0])
        lp = util.segment_log_softmax(v, np.array([0, 3, 4]))
        assert np.all(np.isfinite(lp))
        assert lp[0] == pytest.approx(0.0, abs=1e-12)
        assert lp[3] == 0.0

    def test_repeat_per_segment(self):
        vals = np.array([[1.0], [2.0], [3.0]])
        out = util.repeat_per_segment(vals, [2, 0, 1])
        np.testing.assert_array_equal(out, [[1.0], [1.0], [3.0]])


class TestBlobContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a": rng.normal(size=(4, 5)),
            "b": rng.integers(0, 100, size=7).astype(np.int64),
            "c": rng.normal(size=3).astype(np.float32),
        }
        p = tmp_path / "x.bin"
        util.write_blob(p, "test-kind", arrays, meta={"note": "hi"})
        kind, got, meta = util.read_blob(p)
        assert kind == "test-kind"
        assert meta == {"note": "hi"}
        assert set(got) == set(arrays)
        for k in arrays:
            assert got[k].dtype == arrays[k].dtype
            np.testing.assert_array_equal(got[k], arrays[k])

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"not a blob at all")
        with pytest.raises(ValueError):
            util.read_blob(p)
