"""Closed-loop delayed execution.

Synchronous chunked control: observe, hold the agent while the world runs for
``delta`` seconds, then execute the returned chunk one action per control step.
The policy sees the state from *before* the hold.  The first inference is
assumed to finish before t=0, so chunk ``c`` starts executing at
``c * h_act * dt + c * delta``.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import envs
from .diffusion.model import DiffusionModel, sample
from .errors import ChunkLengthError, DelayPolicyError
from .trajectory import TimingConfig, Trajectory


class Policy(Protocol):
    def act(self, obs_window: np.ndarray, delta: float) -> np.ndarray: ...


@dataclass(frozen=True)
class ExecMode:
    mode: str = "synchronous"
    delta_source: str = "fixed"  # or "measured"
    probe_repetitions: int = 5

    def __post_init__(self):
        if self.mode != "synchronous":
            raise ValueError(f"unsupported execution mode {self.mode!r}")
        if self.delta_source not in ("fixed", "measured"):
            raise ValueError(f"delta_source must be 'fixed' or 'measured', got {self.delta_source!r}")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    arrival_time: float
    final_error: float
    delta_used: float
    chunks_executed: int
    wall_inference: float
    arrived: bool = True
    seed: int = 0


class ReplayPolicy:
    """Plays back a fixed action sequence chunk by chunk, ignoring observations and delay."""

    def __init__(self, actions, h_act: int):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        self.h_act = h_act
        self.cursor = 0
        self.valid = h_act

    @classmethod
    def from_trajectory(cls, traj: Trajectory, h_act: int) -> "ReplayPolicy":
        return cls(traj.actions, h_act)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.actions)

    def act(self, obs_window, delta):
        part = self.actions[self.cursor : self.cursor + self.h_act]
        self.valid = len(part)
        self.cursor += len(part)
        pad = np.zeros((self.h_act - len(part), self.actions.shape[1]))
        return np.concatenate([part, pad])


class ExpertPolicy(ReplayPolicy):
    """Zero-delay scripted expert: regenerates the demonstration for each episode and replays it."""

    name = "expert"

    def __init__(self, h_act: int):
        super().__init__(np.zeros((0, 1)), h_act)

    def reset(self, spec: envs.TaskSpec, seed: int, cfg: TimingConfig):
        self.actions = np.asarray(envs.expert_demo(spec, seed).actions)
        self.cursor = 0


class DiffusionPolicy:
    """Wraps a trained model; a delay-unaware model simply ignores ``delta``."""

    def __init__(self, model: DiffusionModel, seed: int = 0):
        self.model = model
        self.base_seed = seed
        self.rng = np.random.default_rng(seed)

    @property
    def name(self) -> str:
        return self.model.method

    def reset(self, spec, seed: int, cfg):
        self.rng = np.random.default_rng([self.base_seed, int(seed)])

    def act(self, obs_window, delta):
        return sample(self.model, self.model.condition(obs_window, delta), self.rng)


def observation_window(history: Sequence[np.ndarray], h_obs: int) -> np.ndarray:
    """Last ``h_obs`` state vectors, front-padded with the oldest available one."""
    tail = list(history[-h_obs:])
    while len(tail) < h_obs:
        tail.insert(0, tail[0])
    return np.array(tail)


def measure_delay(policy, probe_obs, repetitions: int = 10, delta: float = 0.0) -> float:
    """Median wall-clock seconds of one ``policy.act`` call on ``probe_obs``."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        policy.act(probe_obs, delta)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def run_episode(
    policy,
    spec: envs.TaskSpec,
    cfg: TimingConfig,
    mode: ExecMode = ExecMode(),
    seed: int = 0,
    trace: list | None = None,
) -> EpisodeResult:
    """Roll out ``policy`` under synchronous chunked execution with inference delay.

    ``trace``, if given, receives every world state vector (including those
    during holds) for inspection.
    """
    if not math.isclose(cfg.dt, spec.dt, rel_tol=1e-12):
        raise ValueError(f"timing dt={cfg.dt} does not match task dt={spec.dt}")
    state = envs.reset(spec, seed)
    if hasattr(policy, "reset"):
        policy.reset(spec, seed, cfg)
    history = [state.vector()]
    h_act, d_a = cfg.h_act, spec.action_dim

    delta = cfg.delta
    if mode.delta_source == "measured":
        delta = measure_delay(policy, observation_window(history, cfg.h_obs), mode.probe_repetitions)
        if hasattr(policy, "reset"):
            policy.reset(spec, seed, cfg)

    arrival = None
    wall = 0.0
    chunks = 0
    done = False
    while not done:
        obs = observation_window(history, cfg.h_obs)
        t0 = time.perf_counter()
        chunk = np.asarray(policy.act(obs, delta), dtype=np.float64)
        wall += time.perf_counter() - t0
        if chunk.shape != (h_act, d_a):
            chunk = chunk.reshape(-1, d_a) if chunk.size % d_a == 0 else chunk
            if chunk.shape != (h_act, d_a):
                raise ChunkLengthError(f"policy returned chunk of shape {np.shape(chunk)}, expected {(h_act, d_a)}")
        if chunks > 0 and delta > 0:
            state = envs.hold(state, delta, history)
            if arrival is None and envs.arrived(state):
                arrival = state.time
        expected = chunks * h_act * cfg.dt + chunks * delta
        if not math.isclose(state.time, expected, rel_tol=1e-9, abs_tol=1e-9):
            raise DelayPolicyError(f"timeline drift at chunk {chunks}: t={state.time!r}, expected {expected!r}")
        if envs.finished(state, arrival is not None):
            break
        for a in chunk[: getattr(policy, "valid", h_act)]:
            state = envs.step(state, a)
            history.append(state.vector())
            if arrival is None and envs.arrived(state):
                arrival = state.time
            if envs.finished(state, arrival is not None):
                done = True
                break
        chunks += 1
        if getattr(policy, "exhausted", False):
            done = True
    if trace is not None:
        trace.extend(history)
    return EpisodeResult(
        success=envs.success(state, spec),
        arrival_time=min(arrival, spec.horizon) if arrival is not None else spec.horizon,
        final_error=envs.final_error(state),
        delta_used=delta,
        chunks_executed=chunks,
        wall_inference=wall,
        arrived=arrival is not None,
        seed=seed,
    )


@dataclass(frozen=True)
class SweepRow:
    method: str
    delta: float
    success_rate: float
    episodes: int
    mean_arrival: float
    mean_final_error: float
    failures: int = 0
    policy_delta: float | None = None

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "delta": self.delta,
            "success_rate": self.success_rate,
            "episodes": self.episodes,
            "mean_arrival": self.mean_arrival,
            "mean_final_error": self.mean_final_error,
            "failures": self.failures,
        }


def sweep(
    policies: Mapping[str, object],
    spec: envs.TaskSpec,
    cfg: TimingConfig,
    deltas: Sequence[float],
    episodes: int,
    seeds: Sequence[int],
    mode: ExecMode = ExecMode(),
) -> list[SweepRow]:
    """Success rate per (policy, delay) over ``episodes`` x ``seeds`` rollouts.

    Every method sees the same initial conditions.  Episode errors are counted
    in ``failures`` (and as unsuccessful) instead of aborting the sweep.
    """
    if not deltas:
        raise ValueError("at least one delay is required")
    rows = []
    for name, policy in policies.items():
        for delta in deltas:
            dcfg = cfg.with_delta(delta)
            results, failures = [], 0
            for seed in seeds:
                for e in range(episodes):
                    es = envs.episode_seed(seed, e, envs.EVAL_STREAM)
                    try:
                        results.append(run_episode(policy, spec, dcfg, mode, es))
                    except Exception:  # noqa: BLE001 - recorded, sweep continues
                        failures += 1
            total = len(results) + failures
            wins = sum(r.success for r in results)
            rows.append(
                SweepRow(
                    method=name,
                    delta=float(delta),
                    success_rate=wins / total if total else 0.0,
                    episodes=total,
                    mean_arrival=float(np.mean([r.arrival_time for r in results])) if results else math.nan,
                    mean_final_error=float(np.mean([r.final_error for r in results])) if results else math.nan,
                    failures=failures,
                )
            )
    return rows
