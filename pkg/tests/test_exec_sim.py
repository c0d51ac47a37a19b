from __future__ import annotations

import statistics

import numpy as np
import pytest

from delaypolicy import envs, exec_sim
from delaypolicy.compress import compress
from delaypolicy.errors import ChunkLengthError
from delaypolicy.exec_sim import ExecMode, ExpertPolicy, ReplayPolicy, measure_delay, run_episode, sweep
from delaypolicy.trajectory import TimingConfig

SPEC = envs.TaskSpec()
# unit-step instance: 16 steps of one second, four-action chunks, two-second delay
UNIT = envs.TaskSpec(dt=1.0, deadline=16.0, horizon=30.0, max_step=100.0, object_x=(1.0, 1.0), object_v=(0.1, 0.1))


def test_expert_replay_at_zero_delay_arrives_on_time():
    cfg = SPEC.timing(0.0)
    for seed in range(20):
        demo = envs.expert_demo(SPEC, seed)
        res = run_episode(ReplayPolicy.from_trajectory(demo, cfg.h_act), SPEC, cfg, seed=seed)
        assert res.success
        assert res.arrival_time == pytest.approx(demo.n * SPEC.dt, abs=1e-9)


def test_unit_instance_replay_oracles():
    demo = envs.expert_demo(UNIT, 0)
    assert demo.n == 16
    cfg = TimingConfig(1.0, 2.0, 4)
    late = run_episode(ReplayPolicy.from_trajectory(demo, 4), UNIT, cfg, seed=0)
    assert late.arrival_time == 22.0 and not late.success
    ct = compress(demo, cfg)
    assert ct.traj.n == 12
    on_time = run_episode(ReplayPolicy.from_trajectory(ct.traj, 4), UNIT, cfg, seed=0)
    assert on_time.arrival_time == 16.0 and on_time.success


def test_hold_semantics_in_trace():
    demo = envs.expert_demo(UNIT, 0)
    cfg = TimingConfig(1.0, 2.0, 4)
    trace = []
    run_episode(ReplayPolicy.from_trajectory(demo, 4), UNIT, cfg, seed=0, trace=trace)
    trace = np.array(trace)
    # after four actions the agent freezes for two world steps while the object keeps moving
    assert trace[4, 0] == trace[5, 0] == trace[6, 0]
    assert trace[5, 1] > trace[4, 1] and trace[6, 1] > trace[5, 1]
    assert trace[7, 0] != trace[6, 0]


def _plain_rollout(actions, spec, seed):
    s = envs.reset(spec, seed)
    out = [s.vector()]
    for a in actions:
        s = envs.step(s, a)
        out.append(s.vector())
        if envs.finished(s, envs.arrived(s)):
            break
    return np.array(out)


def test_zero_delay_matches_plain_rollout():
    cfg = SPEC.timing(0.0)
    for seed in range(5):
        demo = envs.expert_demo(SPEC, seed)
        trace = []
        run_episode(ReplayPolicy.from_trajectory(demo, cfg.h_act), SPEC, cfg, seed=seed, trace=trace)
        np.testing.assert_array_equal(np.array(trace), _plain_rollout(demo.actions, SPEC, seed))


def test_policy_sees_pre_hold_state():
    seen = []

    class Spy:
        def act(self, obs, delta):
            seen.append(obs[-1].copy())
            return np.zeros((4, 1))

    trace = []
    run_episode(Spy(), UNIT, TimingConfig(1.0, 2.0, 4, 1), seed=0, trace=trace)
    # the second query happens right after chunk one, before the first hold
    np.testing.assert_array_equal(seen[1], trace[4])


def test_wrong_chunk_length_raises():
    class Short:
        def act(self, obs, delta):
            return np.zeros((3, 1))

    with pytest.raises(ChunkLengthError):
        run_episode(Short(), SPEC, SPEC.timing(0.05, h_act=4), seed=0)


def test_dt_mismatch_rejected():
    with pytest.raises(ValueError, match="dt"):
        run_episode(ExpertPolicy(8), SPEC, TimingConfig(0.1), seed=0)


class SleepStub:
    def __init__(self, seconds):
        self.seconds = seconds

    def act(self, obs, delta):
        import time

        time.sleep(self.seconds)
        return np.zeros((8, 1))


def test_measure_delay_sleep_stub():
    assert measure_delay(SleepStub(0.010), np.zeros((2, 4)), 10) == pytest.approx(0.010, rel=0.2)
    assert measure_delay(SleepStub(0.0), np.zeros((2, 4)), 10) < 1e-3
    with pytest.raises(ValueError):
        measure_delay(SleepStub(0.0), np.zeros((2, 4)), 0)


def test_median_of_ten_is_steadier_than_one(monkeypatch):
    """Deterministic fake clock: each call costs 10 ms plus heavy-tailed jitter."""
    rng = np.random.default_rng(0)
    clock = [0.0]
    monkeypatch.setattr(exec_sim.time, "perf_counter", lambda: clock[0])

    class Jittery:
        def act(self, obs, delta):
            clock[0] += 0.010 + rng.exponential(0.005)
            return np.zeros((8, 1))

    one = [measure_delay(Jittery(), None, 1) for _ in range(200)]
    ten = [measure_delay(Jittery(), None, 10) for _ in range(200)]
    assert statistics.pvariance(ten) < statistics.pvariance(one)


def test_measured_delta_source_uses_probe():
    res = run_episode(SleepStub(0.0), SPEC, SPEC.timing(0.3), ExecMode(delta_source="measured"), seed=0)
    assert 0.0 < res.delta_used < 1e-3


def test_sweep_shape_and_expert_rate():
    rows = sweep({"expert": ExpertPolicy(8)}, SPEC, SPEC.timing(), [0.0], 10, [0])
    assert len(rows) == 1
    assert rows[0].success_rate == 1.0 and rows[0].episodes == 10
    rows = sweep({"expert": ExpertPolicy(8)}, SPEC, SPEC.timing(), [0.0, 0.1], 5, [0, 1])
    assert [(r.method, r.delta, r.episodes) for r in rows] == [("expert", 0.0, 10), ("expert", 0.1, 10)]
    assert rows[1].success_rate < 1.0
    for r in rows:
        assert r.success_rate * r.episodes == pytest.approx(round(r.success_rate * r.episodes))


def test_sweep_counts_failures_without_aborting():
    class Broken:
        def act(self, obs, delta):
            raise RuntimeError("boom")

    rows = sweep({"broken": Broken(), "expert": ExpertPolicy(8)}, SPEC, SPEC.timing(), [0.0], 4, [0])
    assert rows[0].failures == 4 and rows[0].success_rate == 0.0
    assert rows[1].failures == 0 and rows[1].success_rate == 1.0
    assert rows[0].as_dict()["failures"] == 4
    with pytest.raises(ValueError):
        sweep({"expert": ExpertPolicy(8)}, SPEC, SPEC.timing(), [], 1, [0])
