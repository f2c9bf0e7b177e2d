"""Decision logs, perspective streams, and continuous-time discounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetlab.transitions import (
    DRIVER_CENTRIC,
    SYSTEM_CENTRIC,
    EpisodeLog,
    Step,
    TrainerConfig,
    build_driver_centric,
    build_system_centric,
    discount,
)


def make_log(entries, end_time):
    """entries: (time, driver_id, reward); observations are stand-in ints."""
    log = EpisodeLog(end_time=end_time)
    for i, (t, d, r) in enumerate(entries):
        log.steps.append(Step(t, d, f"s{i}", i, r))
        log.total_reward += r
    return log


class TestStreams:
    def test_two_driver_interleaved_episode(self):
        # drivers 1 and 2 alternate decisions at t = 0, 1, 2, 3; episode ends at 5
        log = make_log([(0.0, 1, 1.0), (1.0, 2, 2.0), (2.0, 1, 3.0), (3.0, 2, 4.0)], 5.0)

        sys = build_system_centric(log)
        assert len(sys) == 4
        assert [tr.dt for tr in sys] == [1.0, 1.0, 1.0, 2.0]
        assert [tr.done for tr in sys] == [False, False, False, True]
        assert sys[0].next_obs == "s1" and sys[2].next_obs == "s3"
        assert sys[3].next_obs is None
        assert all(tr.perspective == SYSTEM_CENTRIC for tr in sys)

        drv = build_driver_centric(log)
        assert set(drv) == {1, 2}
        d1, d2 = drv[1], drv[2]
        # driver 1 acts at 0 and 2: one linking transition skipping driver 2's turn
        assert [(tr.obs, tr.next_obs, tr.dt, tr.done) for tr in d1] == [
            ("s0", "s2", 2.0, False),
            ("s2", None, 3.0, True),
        ]
        assert [(tr.obs, tr.next_obs, tr.dt, tr.done) for tr in d2] == [
            ("s1", "s3", 2.0, False),
            ("s3", None, 2.0, True),
        ]
        assert all(tr.perspective == DRIVER_CENTRIC for tr in d1 + d2)

    def test_single_driver_views_coincide(self):
        log = make_log([(0.0, 7, 1.0), (2.0, 7, 0.5), (3.0, 7, 2.0)], 4.0)
        sys = build_system_centric(log)
        drv = build_driver_centric(log)[7]
        for a, b in zip(sys, drv):
            assert (a.obs, a.action, a.reward, a.next_obs, a.dt, a.done) == (
                b.obs, b.action, b.reward, b.next_obs, b.dt, b.done)

    def test_one_decision_gives_one_terminal(self):
        log = make_log([(1.5, 3, 2.5)], 10.0)
        (tr,) = build_driver_centric(log)[3]
        assert tr.done and tr.next_obs is None
        assert tr.dt == 8.5

    @given(st.lists(st.tuples(st.integers(0, 4), st.floats(0.0, 5.0)), min_size=1, max_size=40),
           st.floats(0.1, 3.0))
    @settings(max_examples=80, deadline=None)
    def test_driver_streams_partition_the_log(self, moves, tail):
        times = np.cumsum([0.4] * len(moves))
        entries = [(float(t), d, r) for t, (d, r) in zip(times, moves)]
        log = make_log(entries, float(times[-1]) + tail)

        streams = build_driver_centric(log)
        total = sum(len(s) for s in streams.values())
        assert total == len(log.steps)
        # every recorded step appears in exactly one stream
        seen = sorted(tr.action for s in streams.values() for tr in s)
        assert seen == list(range(len(log.steps)))
        # reward conservation against the system view
        sys_total = sum(tr.reward for tr in build_system_centric(log))
        drv_total = sum(tr.reward for s in streams.values() for tr in s)
        assert drv_total == pytest.approx(sys_total)
        assert sys_total == pytest.approx(log.total_reward)
        # within a stream, time gaps span first decision to episode end
        for d, s in streams.items():
            first_time = min(t for t, drv, _ in entries if drv == d)
            assert sum(tr.dt for tr in s) == pytest.approx(log.end_time - first_time)
            assert s[-1].done
            assert all(not tr.done for tr in s[:-1])


class TestDiscount:
    def test_values(self):
        assert discount(0.99, 0.0) == 1.0
        assert discount(0.99, 2.0) == pytest.approx(0.9801, abs=1e-12)
        for dt in (0.0, 3.7, 100.0):
            assert discount(1.0, dt) == 1.0

    @given(st.floats(0.01, 1.0), st.floats(0.0, 50.0), st.floats(0.0, 50.0))
    @settings(max_examples=50, deadline=None)
    def test_compounds_over_time(self, gamma, a, b):
        assert discount(gamma, a) * discount(gamma, b) == pytest.approx(
            discount(gamma, a + b), rel=1e-9)


class TestTrainerConfig:
    def test_defaults_valid(self):
        cfg = TrainerConfig()
        assert cfg.gamma == 0.99
        assert cfg.batch_size == 32
        assert cfg.replay_capacity == 20000
        assert cfg.n_step == 1

    @pytest.mark.parametrize("kwargs", [
        {"gamma": 0.0},
        {"gamma": 1.5},
        {"clip": 1.0},
        {"clip": 0.0},
        {"batch_size": 0},
        {"lr_policy": -1e-4},
        {"parallel_envs": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainerConfig(**kwargs)

    def test_gamma_one_allowed(self):
        assert TrainerConfig(gamma=1.0).gamma == 1.0
