"""Model checkpoints: a small JSON header followed by a little-endian float64 payload.

Layout::

    MAGIC | uint32 version | uint32 header length | header (JSON, sorted keys)
    | betas | state mean | state scale | action mean | action scale | parameters

Parameters are written in :data:`PARAM_ORDER`.  Saving the same model twice
gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError, UnsupportedVersionError
from ..trajectory import Normalization
from .denoiser import DenoiserDims, flatten, unflatten
from .model import DiffusionModel
from .schedule import NoiseSchedule

MAGIC = b"DLYCKPT\n"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<II")


def to_bytes(model: DiffusionModel) -> bytes:
    sched = model.schedule
    header = {
        "dims": model.dims.to_dict(),
        "diffusion_steps": sched.K,
        "beta_start": sched.beta_start,
        "beta_end": sched.beta_end,
        "delta_max": float(model.delta_max),
        "method": model.method,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    norm = model.normalization
    payload = np.concatenate(
        [sched.betas, norm.state_mean, norm.state_scale, norm.action_mean, norm.action_scale, flatten(model.params)]
    )
    return MAGIC + _PREFIX.pack(CKPT_VERSION, len(head)) + head + payload.astype("<f8").tobytes()


def from_bytes(blob: bytes, source: str = "<bytes>") -> DiffusionModel:
    if not blob.startswith(MAGIC):
        raise DataError(f"{source}: not a model checkpoint")
    off = len(MAGIC)
    if len(blob) < off + _PREFIX.size:
        raise DataError(f"{source}: truncated checkpoint header")
    version, head_len = _PREFIX.unpack_from(blob, off)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (expected {CKPT_VERSION})")
    off += _PREFIX.size
    try:
        header = json.loads(blob[off : off + head_len].decode("utf-8"))
        dims = DenoiserDims(**header["dims"])
        K = int(header["diffusion_steps"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{source}: malformed checkpoint header ({exc})") from exc
    off += head_len
    body = blob[off:]
    if len(body) % 8:
        raise DataError(f"{source}: payload is not a whole number of float64 values")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    d_s, d_a = dims.state_dim, dims.action_dim
    sizes = [K, d_s, d_s, d_a, d_a]
    fixed = sum(sizes)
    if len(vec) < fixed:
        raise DataError(f"{source}: payload too short")
    parts, pos = [], 0
    for size in sizes:
        parts.append(vec[pos : pos + size])
        pos += size
    betas = parts[0].copy()
    betas.setflags(write=False)
    try:
        params = unflatten(vec[pos:], dims)
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from exc
    return DiffusionModel(
        dims=dims,
        params=params,
        schedule=NoiseSchedule(betas, float(header["beta_start"]), float(header["beta_end"])),
        normalization=Normalization(*parts[1:]),
        delta_max=float(header["delta_max"]),
        method=str(header["method"]),
    )


def save_model(model: DiffusionModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))


def load_model(path) -> DiffusionModel:
    return from_bytes(Path(path).read_bytes(), str(path))
