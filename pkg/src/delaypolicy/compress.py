"""Delay compensation of zero-delay demonstrations.

A demonstration of ``n`` steps executed in chunks of ``h_act`` with a hold of
``delta`` between chunks finishes late.  :func:`compress` shortens it by
skipping source states at chunk boundaries so that chunked execution still
reaches the final state by ``n * dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyTrajectoryError, UnreachableError
from .trajectory import Dataset, Meta, TimingConfig, Trajectory, compute_normalization, dp_execution_time

_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class LengthChoice:
    length: int
    skip_schedule: tuple[int, ...]
    collapsed: bool = False
    """True when skips had no chunk boundary to go to and were folded in before the terminal state.

    The schedule then holds that single implicit skip.
    """


@dataclass(frozen=True, eq=False)
class CompressedTrajectory:
    traj: Trajectory
    source_len: int
    delta: float
    skip_schedule: tuple[int, ...]
    index_map: tuple[int, ...]
    collapsed: bool = False
    observed: np.ndarray | None = None
    """States the delayed executor sees at each compressed index (see :func:`pre_delay_observations`)."""

    @property
    def length(self) -> int:
        return self.traj.n


def adjusted_length(n: int, cfg: TimingConfig) -> float:
    """Continuous length whose chunked execution takes exactly ``n * dt``."""
    if n < 1:
        raise EmptyTrajectoryError("empty trajectory")
    return (n * cfg.dt + cfg.delta) / (cfg.dt + cfg.delta / cfg.h_act)


def _better(cand: int, best: int, n: int, cfg: TimingConfig) -> bool:
    target = n * cfg.dt
    e_c = dp_execution_time(cand, cfg) - target
    e_b = dp_execution_time(best, cfg) - target
    if math.isclose(abs(e_c), abs(e_b), rel_tol=_TIE_RTOL, abs_tol=_TIE_RTOL * cfg.dt):
        # tie: arrive early rather than late
        return e_c <= 0 < e_b
    return abs(e_c) < abs(e_b)


def choose_integer_length(n: int, cfg: TimingConfig) -> LengthChoice:
    """Integer compressed length closest in execution time to ``n * dt``, and its skip schedule.

    Starts from the rounded continuous solution and walks down while the
    candidate still overshoots, so the ceiling in the chunk count cannot hide
    a better length below ``floor(n')``.  Among the last length that arrives no
    later than the target and the next one up, the closer wins; ties go to the
    early one.
    """
    if n < 1:
        raise EmptyTrajectoryError("empty trajectory")
    target = n * cfg.dt
    slack = _TIE_RTOL * cfg.dt
    lo = min(n, math.ceil(adjusted_length(n, cfg)))
    while lo > 1 and dp_execution_time(lo, cfg) > target + slack:
        lo -= 1
    while lo < n and dp_execution_time(lo + 1, cfg) <= target + slack:
        lo += 1
    best = lo
    if lo < n and _better(lo + 1, lo, n, cfg):
        best = lo + 1
    return LengthChoice(best, *_skip_schedule(n, best, cfg.h_act))


def _skip_schedule(n: int, length: int, h_act: int) -> tuple[tuple[int, ...], bool]:
    skips = n - length
    boundaries = math.ceil(length / h_act) - 1
    if boundaries == 0:
        # one implicit boundary just before the terminal state
        return ((skips,), True) if skips > 0 else ((), False)
    base = skips // boundaries
    schedule = [base] * boundaries
    schedule[-1] += skips - base * boundaries
    return tuple(schedule), False


def skip_amount(n: int, length: int | None, cfg: TimingConfig, continuous: bool = False):
    """States skipped per chunk boundary.

    ``continuous=True`` gives ``delta / dt``.  Otherwise the integer
    per-boundary schedule for compressing ``n`` steps into ``length`` steps
    (``length`` defaults to :func:`choose_integer_length`).
    """
    if continuous:
        return cfg.delta / cfg.dt
    if length is None:
        return choose_integer_length(n, cfg).skip_schedule
    if length > n:
        raise DataError(f"compressed length {length} exceeds source length {n}")
    return _skip_schedule(n, length, cfg.h_act)[0]


def index_map(length: int, schedule: Sequence[int], h_act: int, n: int) -> tuple[int, ...]:
    """Source index for each compressed index ``0..length``; the last entry is always ``n``."""
    out = []
    offset = 0
    for i in range(length):
        if i and i % h_act == 0:
            offset += schedule[i // h_act - 1]
        out.append(i + offset)
    out.append(n)
    return tuple(out)


def pre_delay_observations(source: Trajectory, states: np.ndarray, imap: Sequence[int], cfg: TimingConfig) -> np.ndarray:
    """What a synchronous executor observes at each index of a compressed trajectory.

    At a chunk start ``c * h_act`` (``c >= 1``) the policy is queried before
    the hold, so the agent already sits at the compressed state while the rest
    of the world lags ``delta`` behind: its coordinates are read from the
    source at ``imap[i] - delta / dt`` (linearly interpolated, never earlier
    than one step after the previous kept state).  Every other index is
    observed as stored.
    """
    obs = np.array(states, dtype=np.float64)
    d_a = source.action_dim
    lag = cfg.delta / cfg.dt
    src = source.states
    for i in range(cfg.h_act, len(states) - 1, cfg.h_act):
        p = max(imap[i - 1] + 1.0, imap[i] - lag)
        lo = min(int(math.floor(p)), source.n)
        frac = p - lo
        hi = min(lo + 1, source.n)
        obs[i, d_a:] = (1.0 - frac) * src[lo, d_a:] + frac * src[hi, d_a:]
    return obs


def smooth_states(states: np.ndarray, dims: int) -> np.ndarray:
    """One pass of a centred 3-point moving average over interior rows of the first ``dims`` columns."""
    out = np.array(states, dtype=np.float64)
    if len(out) > 2 and dims:
        s = states[:, :dims]
        out[1:-1, :dims] = (s[:-2] + s[1:-1] + s[2:]) / 3.0
    return out


def compress(
    traj: Trajectory,
    cfg: TimingConfig,
    smooth: bool = False,
    max_step: float | None = None,
) -> CompressedTrajectory:
    """Shorten ``traj`` so chunked execution with delay ``cfg.delta`` ends at its final state on time.

    Source states are skipped at chunk boundaries according to
    :func:`choose_integer_length`, the terminal state is pinned to the source's
    final state, and actions are rebuilt as deltas of the kept states.
    ``max_step`` bounds the Euclidean norm of every rebuilt action; exceeding
    it raises :class:`UnreachableError`.
    """
    n = traj.n
    if n < 1:
        raise EmptyTrajectoryError("empty trajectory")
    if not math.isclose(traj.dt, cfg.dt, rel_tol=1e-12):
        raise DataError(f"trajectory dt={traj.dt} does not match timing dt={cfg.dt}")
    choice = choose_integer_length(n, cfg)
    if choice.length < 1:
        raise UnreachableError("trajectory unreachable within budget")
    imap = index_map(choice.length, choice.skip_schedule, cfg.h_act, n)
    states = traj.states[list(imap)]
    d_a = traj.action_dim
    if smooth:
        states = smooth_states(states, d_a)
    actions = np.diff(states[:, :d_a], axis=0)
    if max_step is not None and len(actions):
        norms = np.linalg.norm(actions, axis=1)
        worst = int(np.argmax(norms))
        if norms[worst] > max_step + 1e-12:
            raise UnreachableError(
                f"trajectory unreachable within budget: step {worst} needs {norms[worst]:.4g} > {max_step:.4g}"
            )
    out = Trajectory(states, actions, traj.dt, traj.meta)
    observed = pre_delay_observations(traj, states, imap, cfg)
    return CompressedTrajectory(out, n, cfg.delta, choice.skip_schedule, imap, choice.collapsed, observed)


@dataclass(frozen=True)
class CompressionFailure:
    index: int
    delta: float
    meta: Meta
    reason: str


@dataclass(frozen=True, eq=False)
class DelayDataset:
    """Output of :func:`build_delay_dataset`: the pooled dataset plus a per-entry record."""

    dataset: Dataset
    failures: tuple[CompressionFailure, ...]
    records: tuple[dict, ...]


def build_delay_dataset(
    trajs: Sequence[Trajectory],
    deltas: Sequence[float],
    cfg: TimingConfig,
    smooth: bool = False,
    max_step: float | None = None,
    pre_delay_obs: bool = True,
) -> DelayDataset:
    """Compress every trajectory once per delay, label, pool and normalize.

    Failures are collected per ``(trajectory, delta)`` pair instead of aborting.
    ``delta == 0`` entries are the uncompressed originals.  With
    ``pre_delay_obs`` the dataset also stores the observations a delayed
    executor sees, so training pairs each chunk with its real query state.
    """
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise DataError("at least one delay is required")
    if any(d < 0 for d in deltas):
        raise DataError("delays must be non-negative")
    out_trajs, labels, observed, failures, records = [], [], [], [], []
    for delta in deltas:
        dcfg = cfg.with_delta(delta)
        for idx, traj in enumerate(trajs):
            try:
                if delta == 0:
                    if traj.n < 1:
                        raise EmptyTrajectoryError("empty trajectory")
                    kept, n_new, sched, obs = traj, traj.n, (), None
                else:
                    ct = compress(traj, dcfg, smooth=smooth, max_step=max_step)
                    kept, n_new, sched, obs = ct.traj, ct.length, ct.skip_schedule, ct.observed
            except DataError as exc:
                failures.append(CompressionFailure(idx, delta, traj.meta, str(exc)))
                continue
            out_trajs.append(kept)
            labels.append(delta)
            observed.append(obs if pre_delay_obs else None)
            records.append(
                {
                    "index": idx,
                    "episode": traj.meta.episode,
                    "seed": traj.meta.seed,
                    "delta": delta,
                    "source_len": traj.n,
                    "length": n_new,
                    "skip_schedule": list(sched),
                    "duration": dp_execution_time(n_new, dcfg),
                }
            )
    if not out_trajs:
        raise DataError("every trajectory failed to compress")
    ds = Dataset(tuple(out_trajs), tuple(labels), compute_normalization(out_trajs), observations=tuple(observed))
    return DelayDataset(ds, tuple(failures), tuple(records))
