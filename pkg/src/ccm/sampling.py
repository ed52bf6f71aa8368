"""Single-step conditional generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .consistency import ConsistencyModel, g
from .tensor import ShapeError


@dataclass(frozen=True)
class SampleRequest:
    v: np.ndarray
    seed: int = 0
    clamp: bool = True


def initial_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape, dtype=np.float32)


def sample_single_step(model: ConsistencyModel, req: SampleRequest) -> np.ndarray:
    """r = g(T * z, v, T) with z drawn from ``req.seed``."""
    v = np.asarray(req.v, dtype=np.float32)
    if v.ndim != 3 or v.shape[0] != model.net_cfg.out_channels:
        raise ShapeError(f"condition must be {model.net_cfg.out_channels}×H×W, got {v.shape}")
    model.net_cfg.check_extent(*v.shape[1:])
    t_max = model.sched.sigma_max
    r_hat = initial_noise(v.shape, req.seed) * np.float32(t_max)
    with T.no_record():
        out = g(model, r_hat, v, t_max).data
    return np.clip(out, -1.0, 1.0) if req.clamp else out.copy()


def sample_batch(model: ConsistencyModel, v_list, seed: int, clamp: bool = True) -> list[np.ndarray]:
    """Element i equals ``sample_single_step`` with seed ``seed + i``."""
    vs = [np.asarray(v, dtype=np.float32) for v in v_list]
    if len({v.shape for v in vs}) > 1:
        raise ShapeError(f"mixed condition extents: {sorted({v.shape for v in vs})}")
    return [sample_single_step(model, SampleRequest(v, seed + i, clamp)) for i, v in enumerate(vs)]
