"""Demonstration data model, timing arithmetic and the binary dataset format.

States are arrays of shape ``(n + 1, D_s)`` and actions ``(n, D_a)``.  The
first ``D_a`` state coordinates are the actuated ones, and demonstrations use
the delta-action convention ``actions[i] == states[i + 1, :D_a] - states[i, :D_a]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    EmptyTrajectoryError,
    TruncatedDatasetError,
    UnsupportedVersionError,
)

FORMAT_VERSION = 1
MAGIC = b"DLYTRAJ\n"
SCALE_FLOOR = 1e-8

_HEADER = struct.Struct("<IIIdI")  # version, D_s, D_a, dt, n_records
_RECORD_LEN = struct.Struct("<Q")
_RECORD_HEAD = struct.Struct("<IdqqHB")  # n, delta, seed, episode, len(task), has observations


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Meta:
    task: str = ""
    seed: int = -1
    episode: int = -1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered states and the actions between them, sampled every ``dt`` seconds."""

    states: np.ndarray
    actions: np.ndarray
    dt: float
    meta: Meta = field(default_factory=Meta)

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        if self.actions.ndim == 2 and self.actions.shape[1]:
            return self.actions.shape[1]
        return 0

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.meta == other.meta
            and _bits_equal(self.dt, other.dt)
            and _arrays_bits_equal(self.states, other.states)
            and _arrays_bits_equal(self.actions, other.actions)
        )

    __hash__ = None

    @classmethod
    def from_states(cls, states, dt: float, action_dim: int, meta: Meta | None = None) -> "Trajectory":
        """Build a trajectory whose actions are the deltas of the actuated coordinates."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.diff(states[:, :action_dim], axis=0)
        return cls(states, actions.reshape(len(states) - 1, action_dim), dt, meta or Meta())


@dataclass(frozen=True)
class TimingConfig:
    """Control timestep, inference delay (both seconds) and the two horizons."""

    dt: float = 0.05
    delta: float = 0.0
    h_act: int = 8
    h_obs: int = 2

    def __post_init__(self):
        if not (self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.delta >= 0):
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        if self.h_act < 1 or self.h_obs < 1:
            raise ValueError("h_act and h_obs must be >= 1")

    def with_delta(self, delta: float) -> "TimingConfig":
        return TimingConfig(self.dt, float(delta), self.h_act, self.h_obs)


@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-dimension affine maps ``(x - mean) / scale`` for states and actions."""

    state_mean: np.ndarray
    state_scale: np.ndarray
    action_mean: np.ndarray
    action_scale: np.ndarray

    def __post_init__(self):
        for name in ("state_mean", "state_scale", "action_mean", "action_scale"):
            object.__setattr__(self, name, _frozen(np.ravel(getattr(self, name)), 1))
        if np.any(self.state_scale <= 0) or np.any(self.action_scale <= 0):
            raise DataError("normalization scale entries must be strictly positive")

    def __eq__(self, other):
        if not isinstance(other, Normalization):
            return NotImplemented
        return all(
            _arrays_bits_equal(getattr(self, k), getattr(other, k))
            for k in ("state_mean", "state_scale", "action_mean", "action_scale")
        )

    __hash__ = None

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "Normalization":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(action_dim), np.ones(action_dim))

    def norm_states(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_scale

    def norm_actions(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_scale

    def denorm_actions(self, a):
        return np.asarray(a) * self.action_scale + self.action_mean


def compute_normalization(trajectories: Sequence[Trajectory]) -> Normalization:
    """Zero-mean / unit-scale statistics over every state and action, scale floored at 1e-8."""
    if not trajectories:
        raise DataError("cannot normalize an empty set of trajectories")
    states = np.concatenate([t.states for t in trajectories])
    acts = [t.actions for t in trajectories if t.n]
    d_a = trajectories[0].action_dim
    actions = np.concatenate(acts) if acts else np.zeros((1, d_a))
    return Normalization(
        states.mean(axis=0),
        np.maximum(states.std(axis=0), SCALE_FLOOR),
        actions.mean(axis=0),
        np.maximum(actions.std(axis=0), SCALE_FLOOR),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Trajectories, each carrying exactly one delay label (seconds).

    ``observations`` optionally gives, per trajectory, the states a delayed
    executor actually observes at each index (``None`` where they equal
    ``states``).  An empty tuple means none are stored.
    """

    trajectories: tuple[Trajectory, ...]
    deltas: tuple[float, ...]
    normalization: Normalization
    format_version: int = FORMAT_VERSION
    observations: tuple[np.ndarray | None, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if len(self.trajectories) != len(self.deltas):
            raise DataError(
                f"{len(self.trajectories)} trajectories but {len(self.deltas)} delay labels"
            )
        if any(not (d >= 0) for d in self.deltas):
            raise DataError("delay labels must be non-negative")
        if self.observations:
            if len(self.observations) != len(self.trajectories):
                raise DataError(f"{len(self.observations)} observation arrays for {len(self)} trajectories")
            obs = []
            for i, (o, traj) in enumerate(zip(self.observations, self.trajectories)):
                if o is not None:
                    o = _frozen(o, 2)
                    if o.shape != traj.states.shape:
                        raise DimensionMismatchError(i, f"observations {o.shape} != states {traj.states.shape}")
                obs.append(o)
            object.__setattr__(self, "observations", tuple(obs) if any(o is not None for o in obs) else ())

    def observed(self, i: int) -> np.ndarray:
        """What the executor sees along trajectory ``i``."""
        o = self.observations[i] if self.observations else None
        return self.trajectories[i].states if o is None else o

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(zip(self.trajectories, self.deltas))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and len(self) == len(other)
            and all(_bits_equal(a, b) for a, b in zip(self.deltas, other.deltas))
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
            and self.normalization == other.normalization
            and all(_arrays_bits_equal(self.observed(i), other.observed(i)) for i in range(len(self)))
        )

    __hash__ = None

    @classmethod
    def from_trajectories(cls, trajectories, deltas=None) -> "Dataset":
        trajectories = tuple(trajectories)
        if deltas is None:
            deltas = (0.0,) * len(trajectories)
        return cls(trajectories, tuple(deltas), compute_normalization(trajectories))

    @property
    def max_delta(self) -> float:
        return max(self.deltas) if self.deltas else 0.0


def _bits_equal(a: float, b: float) -> bool:
    return struct.pack("<d", a) == struct.pack("<d", b)


def _arrays_bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


# --- timing ---------------------------------------------------------------


def target_duration(traj: Trajectory) -> float:
    """Duration of the zero-delay demonstration: ``n * dt``."""
    return traj.n * traj.dt


def dp_execution_time(n: int, cfg: TimingConfig) -> float:
    """Wall time to execute ``n`` actions in chunks of ``h_act`` with a hold of ``delta`` between chunks.

    The first inference happens before t=0 and is not charged, hence the ``- 1``.
    A final partial chunk counts as a chunk.
    """
    if n < 1:
        raise EmptyTrajectoryError("empty trajectory")
    chunks = math.ceil(n / cfg.h_act)
    return n * cfg.dt + (chunks - 1) * cfg.delta


# --- validation -----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    message: str

    def __str__(self):
        return f"{self.kind} at {self.index}: {self.message}"


def validate(traj: Trajectory, atol: float = 1e-9, check_deltas: bool = True) -> Violation | None:
    """Return the first broken invariant of ``traj``, or ``None`` when it is well formed."""
    s, a = traj.states, traj.actions
    if not (traj.dt > 0) or not math.isfinite(traj.dt):
        return Violation("bad timestep", 0, f"dt={traj.dt}")
    if s.ndim != 2:
        return Violation("dimension mismatch", 0, "states must be a 2-D array")
    if len(s) != len(a) + 1:
        return Violation("length mismatch", min(len(s), len(a)), f"{len(s)} states for {len(a)} actions")
    if a.ndim != 2 and len(a):
        return Violation("dimension mismatch", 0, "actions must be a 2-D array")
    bad = np.flatnonzero(~np.isfinite(s).all(axis=1))
    if bad.size:
        return Violation("non-finite state", int(bad[0]), "state contains NaN/inf")
    if len(a):
        bad = np.flatnonzero(~np.isfinite(a).all(axis=1))
        if bad.size:
            return Violation("non-finite action", int(bad[0]), "action contains NaN/inf")
        d_a = a.shape[1]
        if d_a > s.shape[1]:
            return Violation("dimension mismatch", 0, f"D_a={d_a} exceeds D_s={s.shape[1]}")
        if check_deltas:
            err = np.abs(np.diff(s[:, :d_a], axis=0) - a).max(axis=1)
            bad = np.flatnonzero(err > atol)
            if bad.size:
                i = int(bad[0])
                return Violation("delta convention", i, f"actions[{i}] != states[{i + 1}] - states[{i}]")
    return None


# --- persistence ----------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as a header followed by length-prefixed little-endian float64 records."""
    if not ds.trajectories:
        raise DataError("refusing to save an empty dataset")
    first = ds.trajectories[0]
    d_s, d_a, dt = first.state_dim, first.action_dim, first.dt
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(ds.format_version, d_s, d_a, dt, len(ds)))
        norm = ds.normalization
        for arr, dim in ((norm.state_mean, d_s), (norm.state_scale, d_s), (norm.action_mean, d_a), (norm.action_scale, d_a)):
            if arr.shape != (dim,):
                raise DimensionMismatchError(-1, "normalization does not match data dimensions")
            fh.write(arr.astype("<f8").tobytes())
        for i, (traj, delta) in enumerate(ds):
            if traj.state_dim != d_s or (traj.n and traj.action_dim != d_a):
                raise DimensionMismatchError(i, f"dims ({traj.state_dim}, {traj.action_dim}) != ({d_s}, {d_a})")
            if not _bits_equal(traj.dt, dt):
                raise DataError(f"record {i}: dt={traj.dt} differs from dataset dt={dt}")
            task = traj.meta.task.encode("utf-8")
            obs = ds.observations[i] if ds.observations else None
            payload = (
                _RECORD_HEAD.pack(traj.n, delta, traj.meta.seed, traj.meta.episode, len(task), obs is not None)
                + task
                + traj.states.astype("<f8").tobytes()
                + traj.actions.astype("<f8").tobytes()
                + (obs.astype("<f8").tobytes() if obs is not None else b"")
            )
            fh.write(_RECORD_LEN.pack(len(payload)))
            fh.write(payload)


def _read_exact(fh: BinaryIO, size: int, record: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise TruncatedDatasetError(record)
    return buf


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path}: not a trajectory dataset file")
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise TruncatedDatasetError(-1, "truncated header")
        version, d_s, d_a, dt, count = _HEADER.unpack(head)
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported version {version} (expected {FORMAT_VERSION})")
        raw = np.frombuffer(_read_exact(fh, 8 * (2 * d_s + 2 * d_a), -1), dtype="<f8").astype(np.float64)
        norm = Normalization(raw[:d_s], raw[d_s : 2 * d_s], raw[2 * d_s : 2 * d_s + d_a], raw[2 * d_s + d_a :])
        trajs, deltas, observations = [], [], []
        for i in range(count):
            (size,) = _RECORD_LEN.unpack(_read_exact(fh, _RECORD_LEN.size, i))
            payload = _read_exact(fh, size, i)
            if size < _RECORD_HEAD.size:
                raise DimensionMismatchError(i, "record shorter than its header")
            n, delta, seed, episode, tlen, has_obs = _RECORD_HEAD.unpack_from(payload)
            expected = _RECORD_HEAD.size + tlen + 8 * ((n + 1) * d_s * (2 if has_obs else 1) + n * d_a)
            if size != expected:
                raise DimensionMismatchError(i, f"payload of {size} bytes, expected {expected} for n={n}")
            off = _RECORD_HEAD.size
            task = payload[off : off + tlen].decode("utf-8")
            off += tlen
            floats = np.frombuffer(payload, dtype="<f8", offset=off).astype(np.float64)
            states = floats[: (n + 1) * d_s].reshape(n + 1, d_s)
            actions = floats[(n + 1) * d_s : (n + 1) * d_s + n * d_a].reshape(n, d_a)
            trajs.append(Trajectory(states, actions, dt, Meta(task, seed, episode)))
            deltas.append(delta)
            observations.append(floats[(n + 1) * d_s + n * d_a :].reshape(n + 1, d_s) if has_obs else None)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {count} records")
    return Dataset(tuple(trajs), tuple(deltas), norm, version, tuple(observations))


def delta_tag(delta: float) -> str:
    """Directory tag for a delay, e.g. ``0.05 -> 'd50ms'``."""
    return f"d{delta * 1000:g}ms"


def dataset_path(root, task: str, delta: float, seed: int) -> Path:
    return Path(root) / task / delta_tag(delta) / f"{seed}.traj"
