"""Fully connected noise-prediction network with hand-written backpropagation.

Input is ``[noisy chunk, sinusoidal step embedding, encode(condition)]`` where
the encoder is one SiLU layer over the stacked normalized observations
(plus the normalized delay when the policy is delay conditioned).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PARAM_ORDER = ("enc_w", "enc_b", "w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class DenoiserDims:
    state_dim: int
    action_dim: int
    h_act: int = 8
    h_obs: int = 2
    width: int = 256
    emb_dim: int = 32
    cond_hidden: int = 64
    delta_conditioned: bool = True

    @property
    def chunk_dim(self) -> int:
        return self.h_act * self.action_dim

    @property
    def cond_dim(self) -> int:
        return self.h_obs * self.state_dim + (1 if self.delta_conditioned else 0)

    @property
    def in_dim(self) -> int:
        return self.chunk_dim + self.emb_dim + self.cond_hidden

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "enc_w": (self.cond_dim, self.cond_hidden),
            "enc_b": (self.cond_hidden,),
            "w1": (self.in_dim, self.width),
            "b1": (self.width,),
            "w2": (self.width, self.width),
            "b2": (self.width,),
            "w3": (self.width, self.chunk_dim),
            "b3": (self.chunk_dim,),
        }

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(dims: DenoiserDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in dims.shapes().items():
        if name.endswith("_b") or name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def timestep_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (1-based) diffusion steps, shape ``(len(k), dim)``."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = k[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(k), 1))], axis=1)
    return emb


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    s = _sigmoid(z)
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def forward(params, dims: DenoiserDims, x_noisy, k, cond, cache: bool = False):
    """Predicted noise for a batch. ``x_noisy`` is ``(B, chunk_dim)``, ``k`` ``(B,)``, ``cond`` ``(B, cond_dim)``."""
    zc = cond @ params["enc_w"] + params["enc_b"]
    hc, sc = _silu(zc)
    temb = timestep_embedding(k, dims.emb_dim)
    x = np.concatenate([x_noisy, temb, hc], axis=1)
    z1 = x @ params["w1"] + params["b1"]
    h1, s1 = _silu(z1)
    z2 = h1 @ params["w2"] + params["b2"]
    h2, s2 = _silu(z2)
    out = h2 @ params["w3"] + params["b3"]
    if cache:
        return out, (cond, zc, sc, x, z1, s1, h1, z2, s2, h2)
    return out


def backward(params, dims: DenoiserDims, cache, d_out) -> dict[str, np.ndarray]:
    cond, zc, sc, x, z1, s1, h1, z2, s2, h2 = cache
    g = {"w3": h2.T @ d_out, "b3": d_out.sum(axis=0)}
    dz2 = (d_out @ params["w3"].T) * _silu_grad(z2, s2)
    g["w2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params["w2"].T) * _silu_grad(z1, s1)
    g["w1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    dx = dz1 @ params["w1"].T
    dzc = dx[:, dims.chunk_dim + dims.emb_dim :] * _silu_grad(zc, sc)
    g["enc_w"] = cond.T @ dzc
    g["enc_b"] = dzc.sum(axis=0)
    return g


def noise_loss_and_grad(params, dims: DenoiserDims, x_noisy, k, cond, eps, mask=None):
    """Mean over the batch of the masked squared error ``sum_j (eps_hat - eps)^2`` and its gradient."""
    pred, cache = forward(params, dims, x_noisy, k, cond, cache=True)
    diff = pred - eps
    if mask is not None:
        diff = diff * mask
    B = len(eps)
    per_item = np.sum(diff * diff, axis=1)
    loss = float(per_item.sum() / B)
    grads = backward(params, dims, cache, (2.0 / B) * diff)
    return loss, grads, per_item


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in PARAM_ORDER])


def unflatten(vec: np.ndarray, dims: DenoiserDims) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name in PARAM_ORDER:
        shape = dims.shapes()[name]
        size = int(np.prod(shape))
        out[name] = np.array(vec[off : off + size]).reshape(shape)
        off += size
    if off != len(vec):
        raise ValueError(f"parameter vector has {len(vec)} entries, expected {off}")
    return out
