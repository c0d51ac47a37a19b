"""Delay-conditioned diffusion policy: data windows, training, and ancestral sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DataError, DivergenceError, NonFiniteError
from ..trajectory import Dataset, Normalization, TimingConfig
from .denoiser import DenoiserDims, forward, init_params, noise_loss_and_grad
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class Conditioning:
    obs_window: np.ndarray  # (h_obs * D_s,) normalized
    delta_feature: float

    def vector(self, with_delta: bool = True) -> np.ndarray:
        if with_delta:
            return np.concatenate([self.obs_window, [self.delta_feature]])
        return np.array(self.obs_window)


def delta_feature(delta: float, delta_max: float) -> float:
    if delta < 0:
        raise ValueError(f"delay must be non-negative, got {delta}")
    return delta / delta_max if delta_max > 0 else 0.0


def condition_augment(obs_window, delta: float, norm: Normalization, delta_max: float) -> Conditioning:
    """Normalize an ``(h_obs, D_s)`` observation window and append the scaled delay."""
    obs = norm.norm_states(np.asarray(obs_window, dtype=np.float64))
    return Conditioning(np.ravel(obs), delta_feature(delta, delta_max))


def forward_diffuse(a, eps, k, sched: NoiseSchedule):
    """Sample of ``q(a_k | a)``: ``sqrt(ab_k) * a + sqrt(1 - ab_k) * eps``.

    ``k`` may be a scalar or one step per row of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ValueError(f"shape mismatch: chunk {a.shape} vs noise {eps.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"diffusion step out of range [1, {sched.K}]")
    ab = sched.alpha_bar_at(k)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (a.ndim - 1))
    return np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps


# --- training data ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Windows:
    cond: np.ndarray  # (N, cond_dim)
    chunks: np.ndarray  # (N, h_act * D_a), normalized
    mask: np.ndarray  # (N, h_act * D_a), 0 where padded
    deltas: np.ndarray  # (N,)

    def __len__(self):
        return len(self.chunks)


def build_windows(ds: Dataset, h_act: int, h_obs: int, delta_conditioned: bool, delta_max: float | None = None) -> Windows:
    """Stride-1 (observation window, action chunk) pairs from every labeled trajectory.

    Observation windows are edge padded with the first state; chunks running
    past the end repeat the last action and are masked out.  The newest frame
    of each window is taken from the dataset's executor observations when it
    stores them (older frames are always the stored states).
    """
    norm = ds.normalization
    delta_max = ds.max_delta if delta_max is None else delta_max
    conds, chunks, masks, deltas = [], [], [], []
    for i, (traj, delta) in enumerate(ds):
        n = traj.n
        if n < 1:
            continue
        s = norm.norm_states(traj.states)
        seen = norm.norm_states(ds.observed(i))
        a = norm.norm_actions(traj.actions)
        d_a = a.shape[1]
        s_idx = np.arange(n)[:, None] + np.arange(-h_obs + 1, 1)[None, :]
        obs = s[np.clip(s_idx, 0, None)]
        obs[:, -1] = seen[:n]
        obs = obs.reshape(n, -1)
        a_idx = np.arange(n)[:, None] + np.arange(h_act)[None, :]
        chunk = a[np.minimum(a_idx, n - 1)].reshape(n, -1)
        m = np.repeat((a_idx < n).astype(np.float64), d_a, axis=1)
        if delta_conditioned:
            obs = np.concatenate([obs, np.full((n, 1), delta_feature(delta, delta_max))], axis=1)
        conds.append(obs)
        chunks.append(chunk)
        masks.append(m)
        deltas.append(np.full(n, delta))
    if not chunks:
        raise DataError("dataset contains no actions")
    return Windows(np.concatenate(conds), np.concatenate(chunks), np.concatenate(masks), np.concatenate(deltas))


# --- loss -------------------------------------------------------------------


def loss_and_grad(params, dims: DenoiserDims, batch, sched: NoiseSchedule, rng: np.random.Generator):
    """Sample noise and steps for ``batch = (chunks, cond, mask)`` and return ``(loss, grads)``."""
    chunks, cond, mask = batch
    if len(chunks) == 0:
        raise DataError("empty batch")
    k = rng.integers(1, sched.K + 1, size=len(chunks))
    eps = rng.standard_normal(chunks.shape)
    noisy = forward_diffuse(chunks, eps, k, sched)
    loss, grads, per_item = noise_loss_and_grad(params, dims, noisy, k, cond, eps, mask)
    if not math.isfinite(loss):
        bad = int(np.flatnonzero(~np.isfinite(per_item))[0])
        raise NonFiniteError(f"non-finite loss at batch item {bad}", index=bad)
    return loss, grads


# --- optimisation -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    warmup: int = 500
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    diffusion_steps: int = 50
    width: int = 256
    emb_dim: int = 32
    cond_hidden: int = 64
    delta_conditioned: bool = True
    log_every: int = 500


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    progress = min(max(step - cfg.warmup, 0) / span, 1.0)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float):
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] *= b1
            self.m[k] += (1 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + 1e-8)
            if self.cfg.weight_decay and params[k].ndim > 1:
                update = update + self.cfg.weight_decay * params[k]
            params[k] -= lr * update


@dataclass(eq=False)
class DiffusionModel:
    dims: DenoiserDims
    params: dict[str, np.ndarray]
    schedule: NoiseSchedule
    normalization: Normalization
    delta_max: float
    method: str = "DA-DP"
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def delta_conditioned(self) -> bool:
        return self.dims.delta_conditioned

    def condition(self, obs_window, delta: float) -> np.ndarray:
        c = condition_augment(obs_window, delta, self.normalization, self.delta_max)
        return c.vector(self.delta_conditioned)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    timing: TimingConfig,
    seed: int,
    method: str | None = None,
) -> DiffusionModel:
    """Fit a noise-prediction denoiser on stride-1 windows of ``dataset``.

    Batches are drawn uniformly from the pooled windows of every delay label.
    Deterministic for a given seed.
    """
    if len(dataset) == 0:
        raise DataError("empty dataset")
    rng = np.random.default_rng(seed)
    traj0 = dataset.trajectories[0]
    dims = DenoiserDims(
        state_dim=traj0.state_dim,
        action_dim=traj0.action_dim,
        h_act=timing.h_act,
        h_obs=timing.h_obs,
        width=cfg.width,
        emb_dim=cfg.emb_dim,
        cond_hidden=cfg.cond_hidden,
        delta_conditioned=cfg.delta_conditioned,
    )
    windows = build_windows(dataset, timing.h_act, timing.h_obs, cfg.delta_conditioned)
    sched = make_schedule(cfg.diffusion_steps)
    params = init_params(dims, rng)
    opt = AdamW(params, cfg)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(windows), size=min(cfg.batch_size, len(windows)))
        batch = (windows.chunks[idx], windows.cond[idx], windows.mask[idx])
        loss, grads = loss_and_grad(params, dims, batch, sched, rng)
        if loss > DIVERGENCE_LOSS:
            raise DivergenceError(step, loss)
        opt.step(params, grads, lr_at(step, cfg))
        losses[step] = loss
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, loss)
    method = method or ("DA-DP" if cfg.delta_conditioned else "DP")
    return DiffusionModel(dims, params, sched, dataset.normalization, dataset.max_delta, method, losses)


# --- sampling -----------------------------------------------------------------


def reverse_process(params, dims: DenoiserDims, cond: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator):
    """Ancestral DDPM sampling in normalized action space; ``cond`` is ``(B, cond_dim)``."""
    B = len(cond)
    x = rng.standard_normal((B, dims.chunk_dim))
    betas, alphas, ab = sched.betas, sched.alphas, sched.alpha_bar
    sigma = np.sqrt(sched.posterior_variance)
    for k in range(sched.K, 0, -1):
        eps_hat = forward(params, dims, x, np.full(B, k), cond)
        i = k - 1
        x = (x - betas[i] / np.sqrt(1.0 - ab[i]) * eps_hat) / np.sqrt(alphas[i])
        if k > 1:
            x = x + sigma[i] * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sample at diffusion step {k}", index=k)
    return x


def sample(model: DiffusionModel, cond, rng: np.random.Generator) -> np.ndarray:
    """Draw action chunks, de-normalized, shape ``(h_act, D_a)`` (or ``(B, h_act, D_a)`` for batched ``cond``)."""
    if isinstance(cond, Conditioning):
        cond = cond.vector(model.delta_conditioned)
    cond = np.asarray(cond, dtype=np.float64)
    single = cond.ndim == 1
    x = reverse_process(model.params, model.dims, np.atleast_2d(cond), model.schedule, rng)
    chunks = model.normalization.denorm_actions(x.reshape(len(x), model.dims.h_act, model.dims.action_dim))
    return chunks[0] if single else chunks


def with_params(model: DiffusionModel, params) -> DiffusionModel:
    return replace(model, params=params)
