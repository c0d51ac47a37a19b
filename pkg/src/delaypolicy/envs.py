"""Desk-scale dynamic tasks with scripted zero-delay experts.

``intercept1d``
    An object drifts laterally at constant speed and crosses the strike line
    at ``deadline``.  The agent (one coordinate) must be under it at that
    instant.  State vector: ``[agent_x, object_x, object_v, t]``.

``rollingball2d``
    A ball rolls on a plane with linear friction.  The agent must match its
    position and velocity to grab it, then carry it to ``goal``.  State
    vector: ``[agent_x, agent_y, ball_x, ball_y, ball_vx, ball_vy, captured, t]``.

Actions are agent displacements per step, clamped in Euclidean norm to
``max_step``.  Objects are integrated with explicit Euler.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import dataclass_lines, update_dataclass
from .errors import DataError, InfeasibleDemoError
from .trajectory import Meta, TimingConfig, Trajectory

TIME_TOL = 1e-9
TASKS = ("intercept1d", "rollingball2d")


@dataclass(frozen=True)
class TaskSpec:
    task: str = "intercept1d"
    dt: float = 0.05
    tolerance: float = 0.05
    horizon: float = 2.0
    max_step: float = 0.5
    # intercept1d
    deadline: float = 1.4
    object_x: tuple[float, float] = (1.0, 2.0)
    object_v: tuple[float, float] = (0.5, 1.0)
    agent_x: float = 0.0
    # rollingball2d
    friction: float = 0.5
    ball_x: tuple[float, float] = (0.8, 1.2)
    ball_y: tuple[float, float] = (0.3, 0.7)
    ball_vx: tuple[float, float] = (-0.6, -0.3)
    ball_vy: tuple[float, float] = (-0.2, 0.2)
    goal: tuple[float, float] = (0.0, 0.8)
    capture_time: float = 0.8
    carry_time: float = 0.8
    speed_tolerance: float = 0.4

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not (self.tolerance > 0 and self.dt > 0 and self.horizon > 0 and self.max_step > 0):
            raise DataError("tolerance, dt, horizon and max_step must be positive")
        for name in ("object_x", "object_v", "ball_x", "ball_y", "ball_vx", "ball_vy"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise DataError(f"{name}: empty range [{lo}, {hi}]")

    @property
    def state_dim(self) -> int:
        return 4 if self.task == "intercept1d" else 8

    @property
    def action_dim(self) -> int:
        return 1 if self.task == "intercept1d" else 2

    def timing(self, delta: float = 0.0, h_act: int = 8, h_obs: int = 2) -> TimingConfig:
        return TimingConfig(self.dt, delta, h_act, h_obs)


def spec_from_mapping(values: dict, base: TaskSpec | None = None) -> TaskSpec:
    base = base or TaskSpec(task=values.get("task", "intercept1d"))
    return update_dataclass(base, values, "task")


def load_task_spec(path, section: str = "task") -> TaskSpec:
    """Read a ``key = value`` task file (an optional ``[task]`` header is allowed)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n" + text
    parser.read_string(text)
    return spec_from_mapping(dict(parser[section]))


def spec_to_text(spec: TaskSpec) -> str:
    return "\n".join(dataclass_lines(spec)) + "\n"


@dataclass(frozen=True, eq=False)
class EnvState:
    agent: np.ndarray
    agent_vel: np.ndarray
    obj: np.ndarray
    obj_vel: np.ndarray
    goal: np.ndarray
    spec: TaskSpec
    ticks: int = 0
    extra_time: float = 0.0
    captured: bool = False
    deadline_gap: float | None = None
    goal_time: float | None = None

    @property
    def time(self) -> float:
        return self.ticks * self.spec.dt + self.extra_time

    def vector(self) -> np.ndarray:
        if self.spec.task == "intercept1d":
            return np.array([self.agent[0], self.obj[0], self.obj_vel[0], self.time])
        return np.array([*self.agent, *self.obj, *self.obj_vel, float(self.captured), self.time])


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def reset(spec: TaskSpec, seed: int) -> EnvState:
    rng = np.random.default_rng(seed)
    if spec.task == "intercept1d":
        x0 = _uniform(rng, spec.object_x)
        v = _uniform(rng, spec.object_v)
        goal = np.array([x0 + v * spec.deadline])
        return EnvState(np.array([spec.agent_x]), np.zeros(1), np.array([x0]), np.array([v]), goal, spec)
    pos = np.array([_uniform(rng, spec.ball_x), _uniform(rng, spec.ball_y)])
    vel = np.array([_uniform(rng, spec.ball_vx), _uniform(rng, spec.ball_vy)])
    return EnvState(np.zeros(2), np.zeros(2), pos, vel, np.array(spec.goal, dtype=float), spec)


def _advance_object(state: EnvState, dt: float):
    if state.spec.task == "intercept1d":
        return state.obj + state.obj_vel * dt, state.obj_vel
    if state.captured:
        return state.agent.copy(), state.agent_vel.copy()
    return state.obj + state.obj_vel * dt, state.obj_vel * (1.0 - state.spec.friction * dt)


def _bookkeep(state: EnvState) -> EnvState:
    spec = state.spec
    updates = {}
    if spec.task == "intercept1d":
        if state.deadline_gap is None and state.time >= spec.deadline - TIME_TOL:
            updates["deadline_gap"] = float(abs(state.agent[0] - state.obj[0]))
    else:
        if (
            not state.captured
            and np.linalg.norm(state.agent - state.obj) <= spec.tolerance
            and np.linalg.norm(state.agent_vel - state.obj_vel) <= spec.speed_tolerance
        ):
            updates.update(captured=True, obj=state.agent.copy(), obj_vel=state.agent_vel.copy())
        captured = updates.get("captured", state.captured)
        if (
            captured
            and state.goal_time is None
            and np.linalg.norm(state.agent - state.goal) <= spec.tolerance
            and state.time <= spec.horizon + TIME_TOL
        ):
            updates["goal_time"] = state.time
    return replace(state, **updates) if updates else state


def clamp_action(action, max_step: float) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    norm = float(np.linalg.norm(a))
    return a * (max_step / norm) if norm > max_step else a


def step(state: EnvState, action, dt: float | None = None) -> EnvState:
    """Move the agent by the clamped displacement and advance the object by one control step."""
    spec = state.spec
    if dt is not None and not math.isclose(dt, spec.dt, rel_tol=1e-12):
        raise ValueError(f"step dt={dt} does not match task dt={spec.dt}")
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (spec.action_dim,):
        raise ValueError(f"action must have dimension {spec.action_dim}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    a = clamp_action(a, spec.max_step)
    agent = state.agent + a
    agent_vel = a / spec.dt
    moved = replace(state, agent=agent, agent_vel=agent_vel)
    obj, obj_vel = _advance_object(moved, spec.dt)
    return _bookkeep(replace(moved, obj=obj, obj_vel=obj_vel, ticks=state.ticks + 1))


def hold(state: EnvState, duration: float, history: list | None = None) -> EnvState:
    """Advance the world by ``duration`` seconds with the agent held in place (zero-order hold).

    Whole control steps first, then one fractional Euler step for any remainder.
    """
    spec = state.spec
    whole = int(math.floor(duration / spec.dt + TIME_TOL))
    frac = duration - whole * spec.dt
    state = replace(state, agent_vel=np.zeros_like(state.agent_vel))
    if state.captured:
        state = replace(state, obj_vel=np.zeros_like(state.obj_vel))
    for _ in range(whole):
        obj, obj_vel = _advance_object(state, spec.dt)
        state = _bookkeep(replace(state, obj=obj, obj_vel=obj_vel, ticks=state.ticks + 1))
        if history is not None:
            history.append(state.vector())
    if frac > TIME_TOL * spec.dt:
        obj, obj_vel = _advance_object(state, frac)
        state = _bookkeep(replace(state, obj=obj, obj_vel=obj_vel, extra_time=state.extra_time + frac))
        if history is not None:
            history.append(state.vector())
    return state


def success(state: EnvState, spec: TaskSpec | None = None) -> bool:
    spec = spec or state.spec
    if spec.task == "intercept1d":
        return state.deadline_gap is not None and state.deadline_gap <= spec.tolerance
    return state.goal_time is not None


def arrived(state: EnvState) -> bool:
    """Agent has reached its goal (intercept point, or goal while holding the ball)."""
    spec = state.spec
    close = np.linalg.norm(state.agent - state.goal) <= spec.tolerance
    return bool(close if spec.task == "intercept1d" else close and state.captured)


def finished(state: EnvState, has_arrived: bool) -> bool:
    spec = state.spec
    if state.time >= spec.horizon - TIME_TOL:
        return True
    if spec.task == "intercept1d":
        return state.deadline_gap is not None and has_arrived
    return state.goal_time is not None


def final_error(state: EnvState) -> float:
    if state.spec.task == "intercept1d":
        if state.deadline_gap is not None:
            return state.deadline_gap
        return float(abs(state.agent[0] - state.goal[0]))
    return float(np.linalg.norm(state.obj - state.goal))


# --- experts --------------------------------------------------------------


def _hermite(p0, v0, p1, v1, T, t):
    s = np.asarray(t)[:, None] / T
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * p0 + h10 * T * v0 + h01 * p1 + h11 * T * v1


def _planned_path(spec: TaskSpec, start: EnvState) -> np.ndarray:
    dt = spec.dt
    if spec.task == "intercept1d":
        n = int(round(spec.deadline / dt))
        if n < 1 or not math.isclose(n * dt, spec.deadline, rel_tol=1e-9):
            raise DataError(f"deadline {spec.deadline} is not a multiple of dt {dt}")
        frac = np.arange(n + 1)[:, None] / n
        return start.agent + frac * (start.goal - start.agent)
    k_c = int(round(spec.capture_time / dt))
    k_g = int(round(spec.carry_time / dt))
    probe = start
    for _ in range(k_c):
        obj, obj_vel = _advance_object(probe, dt)
        probe = replace(probe, obj=obj, obj_vel=obj_vel)
    t1 = np.arange(k_c + 1) * dt
    first = _hermite(start.agent, np.zeros(2), probe.obj, probe.obj_vel, k_c * dt, t1)
    t2 = np.arange(1, k_g + 1) * dt
    second = _hermite(probe.obj, probe.obj_vel, start.goal, np.zeros(2), k_g * dt, t2)
    return np.concatenate([first, second])


def expert_demo(spec: TaskSpec, seed: int, cfg: TimingConfig | None = None, episode: int = -1) -> Trajectory:
    """Zero-delay demonstration from ``reset(spec, seed)``, replayed through the environment.

    Raises :class:`InfeasibleDemoError` if the plan needs more than ``max_step``
    per step or the replay does not end in success.
    """
    if cfg is not None and not math.isclose(cfg.dt, spec.dt, rel_tol=1e-12):
        raise DataError(f"timing dt={cfg.dt} does not match task dt={spec.dt}")
    state = reset(spec, seed)
    path = _planned_path(spec, state)
    actions = np.diff(path, axis=0)
    peak = float(np.max(np.linalg.norm(actions, axis=1)))
    if peak > spec.max_step:
        raise InfeasibleDemoError(f"infeasible demo (seed {seed}): needs step {peak:.4g} > max_step {spec.max_step}")
    states = [state.vector()]
    for a in actions:
        state = step(state, a)
        states.append(state.vector())
    if not success(state, spec):
        raise InfeasibleDemoError(f"infeasible demo (seed {seed}): replay does not succeed")
    states = np.array(states)
    # delta convention holds exactly on the stored actuated coordinates
    acts = np.diff(states[:, : spec.action_dim], axis=0)
    return Trajectory(states, acts, spec.dt, Meta(spec.task, int(seed), int(episode)))


TRAIN_STREAM = 0
EVAL_STREAM = 1


def episode_seed(seed: int, episode: int, stream: int) -> int:
    """Independent per-episode seed; training and evaluation use disjoint streams."""
    return int(np.random.SeedSequence([int(seed), int(episode), int(stream)]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class DemoSet:
    trajectories: tuple[Trajectory, ...]
    infeasible: tuple[tuple[int, str], ...] = field(default_factory=tuple)

    @property
    def infeasible_rate(self) -> float:
        total = len(self.trajectories) + len(self.infeasible)
        return len(self.infeasible) / total if total else 0.0


def generate_demos(spec: TaskSpec, episodes: int, seed: int) -> DemoSet:
    """``episodes`` expert attempts; infeasible ones are reported, not silently dropped."""
    trajs, bad = [], []
    for e in range(episodes):
        try:
            trajs.append(expert_demo(spec, episode_seed(seed, e, TRAIN_STREAM), episode=e))
        except InfeasibleDemoError as exc:
            bad.append((e, str(exc)))
    return DemoSet(tuple(trajs), tuple(bad))
