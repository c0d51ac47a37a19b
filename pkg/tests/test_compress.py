from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaypolicy.compress import (
    adjusted_length,
    build_delay_dataset,
    choose_integer_length,
    compress,
    index_map,
    pre_delay_observations,
    skip_amount,
    smooth_states,
)
from delaypolicy.errors import EmptyTrajectoryError, UnreachableError
from delaypolicy.trajectory import Meta, TimingConfig, Trajectory, dp_execution_time

from conftest import line_trajectory


def brute_force_lengths(n: int, h: int, m: int) -> set[int]:
    """Every N in [1, n] minimizing |N + (ceil(N/h) - 1) m - n| in integer units, ties resolved early."""
    def err(N):
        return N + (-(-N // h) - 1) * m - n

    best = min(abs(err(N)) for N in range(1, n + 1))
    opts = [N for N in range(1, n + 1) if abs(err(N)) == best]
    early = [N for N in opts if err(N) <= 0]
    return set(early or opts)


def test_adjusted_length_examples():
    assert adjusted_length(16, TimingConfig(1.0, 2.0, 4)) == 12.0
    assert adjusted_length(20, TimingConfig(0.05, 0.05, 4)) == pytest.approx(16.8)
    assert adjusted_length(37, TimingConfig(0.05, 0.0, 4)) == pytest.approx(37.0)


def test_choose_integer_length_examples():
    c = choose_integer_length(16, TimingConfig(1.0, 2.0, 4))
    assert (c.length, c.skip_schedule) == (12, (2, 2))
    assert dp_execution_time(12, TimingConfig(1.0, 2.0, 4)) == 16.0
    # tie between 16 (0.95 s) and 17 (1.05 s): arrive early
    c = choose_integer_length(20, TimingConfig(0.05, 0.05, 4))
    assert c.length == 16
    c = choose_integer_length(20, TimingConfig(0.05, 0.0, 4))
    assert c.length == 20 and all(s == 0 for s in c.skip_schedule)


def test_choose_looks_below_floor_when_ceiling_jumps():
    # n' = 9 exactly, yet f(9) = 9 + 2*8 = 25 is late by 6 while f(8) = 8 + 8 = 16 is
    # early by 3: the extra chunk boundary makes the continuous solution a poor pick.
    cfg = TimingConfig(1.0, 8.0, 4)
    c = choose_integer_length(19, cfg)
    assert c.length in brute_force_lengths(19, 4, 8)
    assert c.length == 8 and c.skip_schedule == (11,)


def test_skip_amount():
    cfg = TimingConfig(1.0, 2.0, 4)
    assert skip_amount(16, 12, cfg, continuous=True) == 2.0
    assert skip_amount(16, 12, TimingConfig(1.0, 0.0, 4), continuous=True) == 0.0
    assert skip_amount(16, 12, cfg) == (2, 2)
    assert skip_amount(16, None, cfg) == (2, 2)


def test_skip_remainder_goes_to_last_boundary():
    assert skip_amount(20, 13, TimingConfig(1.0, 2.0, 4)) == (2, 2, 3)


def test_compress_worked_example():
    traj = line_trajectory(16)
    ct = compress(traj, TimingConfig(1.0, 2.0, 4))
    assert ct.index_map == (0, 1, 2, 3, 6, 7, 8, 9, 12, 13, 14, 15, 16)
    assert ct.length == 12
    np.testing.assert_array_equal(ct.traj.states[-1], traj.states[16])
    np.testing.assert_array_equal(ct.traj.states[4:8], traj.states[6:10])
    np.testing.assert_allclose(ct.traj.actions, np.diff(ct.traj.states[:, :1], axis=0))


def test_compress_identity_and_single_action():
    traj = line_trajectory(10)
    assert compress(traj, TimingConfig(1.0, 0.0, 4)).traj == traj
    one = line_trajectory(1)
    ct = compress(one, TimingConfig(1.0, 5.0, 4))
    assert ct.length == 1 and ct.traj == one


def test_collapsed_skips_flagged():
    traj = line_trajectory(10)
    ct = compress(traj, TimingConfig(1.0, 8.0, 8))
    assert ct.length == 8 and ct.collapsed
    assert ct.skip_schedule == (2,)
    assert ct.index_map[-2:] == (7, 10)


def test_compress_errors():
    with pytest.raises(EmptyTrajectoryError, match="empty trajectory"):
        compress(Trajectory(np.zeros((1, 1)), np.zeros((0, 1)), 1.0), TimingConfig(1.0, 1.0, 4))
    with pytest.raises(UnreachableError, match="unreachable within budget"):
        compress(line_trajectory(16), TimingConfig(1.0, 2.0, 4), max_step=1e-3)


def test_smoothing_keeps_endpoints_and_non_actuated():
    traj = line_trajectory(16, d_s=3)
    ct = compress(traj, TimingConfig(1.0, 2.0, 4), smooth=True)
    raw = compress(traj, TimingConfig(1.0, 2.0, 4))
    np.testing.assert_array_equal(ct.traj.states[0], raw.traj.states[0])
    np.testing.assert_array_equal(ct.traj.states[-1], raw.traj.states[-1])
    np.testing.assert_array_equal(ct.traj.states[:, 1:], raw.traj.states[:, 1:])
    s = raw.traj.states[:, 0]
    assert ct.traj.states[5, 0] == pytest.approx((s[4] + s[5] + s[6]) / 3)
    np.testing.assert_array_equal(smooth_states(np.ones((2, 2)), 1), np.ones((2, 2)))


def test_pre_delay_observations_lag_world_coordinates():
    traj = line_trajectory(16, d_s=3)
    cfg = TimingConfig(1.0, 2.0, 4)
    ct = compress(traj, cfg)
    obs = ct.observed
    for i in range(13):
        if i in (4, 8):
            # agent where the compressed demo puts it, world two steps behind
            assert obs[i, 0] == ct.traj.states[i, 0]
            np.testing.assert_array_equal(obs[i, 1:], traj.states[ct.index_map[i] - 2, 1:])
        else:
            np.testing.assert_array_equal(obs[i], ct.traj.states[i])
    frac = pre_delay_observations(traj, ct.traj.states, ct.index_map, TimingConfig(1.0, 1.5, 4))
    np.testing.assert_allclose(frac[4, 1:], 0.5 * (traj.states[4, 1:] + traj.states[5, 1:]))


def test_build_delay_dataset_cardinality_and_identity():
    trajs = [line_trajectory(16, dt=0.05, seed=s) for s in range(2)]
    out = build_delay_dataset(trajs, [0.0, 0.05, 0.1], TimingConfig(0.05, 0.0, 4))
    assert len(out.dataset) == 6 and not out.failures
    assert out.dataset.deltas == (0.0, 0.0, 0.05, 0.05, 0.1, 0.1)
    only_zero = build_delay_dataset(trajs, [0.0], TimingConfig(0.05, 0.0, 4)).dataset
    assert all(a == b for a, b in zip(only_zero.trajectories, trajs))
    assert only_zero.observations == ()
    assert out.records[2]["length"] == choose_integer_length(16, TimingConfig(0.05, 0.05, 4)).length


def test_build_delay_dataset_reports_unreachable():
    rng = np.random.default_rng(0)
    # bounded demos: every step at most 0.3 per axis, so skipping 2 stays under 1.0
    trajs = [Trajectory.from_states(np.cumsum(rng.uniform(-0.3, 0.3, (33, 2)), axis=0), 1.0, 1, Meta("t", s, s)) for s in range(99)]
    steep = np.zeros((33, 2))
    steep[:, 0] = np.arange(33) * 0.4  # skipping 1 -> 0.8, skipping 2 -> 1.2
    trajs.append(Trajectory.from_states(steep, 1.0, 1, Meta("t", 99, 99)))
    out = build_delay_dataset(trajs, [0.0, 1.0, 2.0], TimingConfig(1.0, 0.0, 4), max_step=1.0)
    assert len(out.dataset) == 299
    assert len(out.failures) == 1
    f = out.failures[0]
    assert (f.index, f.delta, f.meta.episode) == (99, 2.0, 99)
    assert "unreachable" in f.reason


def test_build_delay_dataset_requires_deltas():
    with pytest.raises(Exception):
        build_delay_dataset([line_trajectory(4)], [], TimingConfig(1.0, 0.0, 4))


fixtures = st.tuples(st.integers(1, 200), st.sampled_from([2, 4, 8]), st.integers(0, 8))


@settings(max_examples=300, deadline=None)
@given(fixtures)
def test_choice_matches_brute_force(fx):
    n, h, m = fx
    c = choose_integer_length(n, TimingConfig(1.0, float(m), h))
    assert c.length in brute_force_lengths(n, h, m)


@settings(max_examples=200, deadline=None)
@given(fixtures, st.integers(0, 2**31))
def test_structural_invariants(fx, seed):
    n, h, m = fx
    traj = line_trajectory(n, seed=seed)
    ct = compress(traj, TimingConfig(1.0, float(m), h))
    imap = np.array(ct.index_map)
    assert np.all(np.diff(imap) > 0) and imap[-1] == n and imap[0] == 0
    assert ct.length + sum(ct.skip_schedule) == n
    np.testing.assert_array_equal(ct.traj.states[-1], traj.states[n])
    np.testing.assert_array_equal(ct.traj.states, traj.states[imap])
    replay = ct.traj.states[0, :1] + np.concatenate([[0.0], np.cumsum(ct.traj.actions[:, 0])])
    np.testing.assert_allclose(replay, ct.traj.states[:, 0], rtol=1e-9, atol=1e-9 * np.abs(traj.states).max())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.sampled_from([2, 4, 8]), st.floats(0.0, 6.0))
def test_non_integer_delays_keep_invariants(n, h, m):
    cfg = TimingConfig(1.0, m, h)
    c = choose_integer_length(n, cfg)
    assert 1 <= c.length <= n
    assert sum(c.skip_schedule) == n - c.length
    if not c.collapsed:
        assert len(c.skip_schedule) == math.ceil(c.length / h) - 1
