"""Noise levels, the doubling step schedule, loss weights and skip/out scalings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho < 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")


@dataclass(frozen=True)
class StepScheduleConfig:
    s0: int = 10
    s1: int = 1280
    K: int = 5000

    def __post_init__(self):
        if not 1 < self.s0 <= self.s1:
            raise ValueError(f"need 1 < s0 <= s1, got s0={self.s0}, s1={self.s1}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")


def discretize(sched: NoiseSchedule, n: int) -> np.ndarray:
    """Karras-style levels t_1 < ... < t_N with exact endpoints."""
    if n < 2:
        raise ValueError(f"discretize needs N >= 2, got {n}")
    return _discretize(sched, int(n)).copy()


@lru_cache(maxsize=64)
def _discretize(sched: NoiseSchedule, n: int) -> np.ndarray:
    lo = sched.sigma_min ** (1.0 / sched.rho)
    hi = sched.sigma_max ** (1.0 / sched.rho)
    frac = np.arange(n, dtype=np.float64) / (n - 1)
    levels = (lo + frac * (hi - lo)) ** sched.rho
    # the closed form can be off by an ulp at the ends
    assert abs(levels[0] - sched.sigma_min) <= 1e-12 * sched.sigma_min
    assert abs(levels[-1] - sched.sigma_max) <= 1e-12 * sched.sigma_max
    levels[0] = sched.sigma_min
    levels[-1] = sched.sigma_max
    levels.flags.writeable = False
    return levels


def steps_at(cfg: StepScheduleConfig, k: int) -> int:
    """Number of discretization levels M(k) at training iteration k."""
    if not 0 <= k < cfg.K:
        raise ValueError(f"iteration {k} outside [0, {cfg.K})")
    # runs shorter than the number of doublings still start at s0 + 1
    k_prime = max(1, math.floor(cfg.K / (math.log2(cfg.s1 / cfg.s0) + 1)))
    return min(cfg.s0 * 2 ** (k // k_prime), cfg.s1) + 1


def weighting(t_n: float, t_np1: float) -> float:
    if not t_np1 > t_n:
        raise ValueError(f"weighting needs t_(n+1) > t_n, got {t_n}, {t_np1}")
    return 1.0 / (t_np1 - t_n)


def scalings(sched: NoiseSchedule, t):
    """(a_skip, a_out) at noise level(s) t; exactly (1, 0) at sigma_min."""
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta < sched.sigma_min) or np.any(ta > sched.sigma_max):
        raise ValueError(
            f"t={t} outside [{sched.sigma_min}, {sched.sigma_max}]")
    sd2 = sched.sigma_data ** 2
    dt = ta - sched.sigma_min
    a_skip = sd2 / (dt * dt + sd2)
    a_out = sched.sigma_data * dt / np.sqrt(sd2 + ta * ta)
    if ta.ndim == 0:
        return float(a_skip), float(a_out)
    return a_skip, a_out
