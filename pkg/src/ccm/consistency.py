"""Conditional consistency function, pseudo-Huber CCT loss and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network
from . import tensor as T
from .data import CropSpec, apply_crop
from .network import Parameters, UNetConfig
from .schedule import NoiseSchedule, StepScheduleConfig, discretize, scalings, steps_at
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class ConsistencyModel:
    params: Parameters
    teacher_params: Parameters
    sched: NoiseSchedule
    net_cfg: UNetConfig

    def __post_init__(self):
        a = {k: v.shape for k, v in self.params.items()}
        b = {k: v.shape for k, v in self.teacher_params.items()}
        if a != b:
            raise ValueError("student and teacher parameter sets differ")

    @classmethod
    def create(cls, net_cfg: UNetConfig, sched: NoiseSchedule, seed: int = 0, dtype=np.float32):
        params = network.init(net_cfg, seed, dtype=dtype)
        return cls(params, clone_params(params), sched, net_cfg)

    def astype(self, dtype) -> ConsistencyModel:
        cast = lambda p: {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in p.items()}
        return ConsistencyModel(cast(self.params), cast(self.teacher_params), self.sched, self.net_cfg)


def clone_params(params: Parameters) -> Parameters:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def _per_sample(x, n: int, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype).reshape((n,) + (1,) * 3))


def g(model: ConsistencyModel, r_t, v, t, use_teacher: bool = False) -> Tensor:
    """a_skip(t) * r_t + a_out(t) * G(r_t, v, t); returns r_t itself at t = sigma_min.

    Accepts C×H×W with scalar t or N×C×H×W with scalar or per-sample t.
    """
    r_t = T.as_tensor(r_t)
    v = T.as_tensor(v)
    a_skip, a_out = scalings(model.sched, t)
    params = model.teacher_params if use_teacher else model.params
    dtype = params["conv_in.weight"].dtype
    if r_t.ndim == 3:
        if np.ndim(t) != 0:
            raise ShapeError("a single image takes a scalar noise level")
        if a_out == 0.0:
            return r_t
        out = network.forward(model.net_cfg, params, r_t, v, t)
        return T.add(T.scale(r_t, a_skip), T.scale(out, a_out))
    n = r_t.shape[0]
    skip = np.broadcast_to(a_skip, (n,))
    outs = np.broadcast_to(a_out, (n,))
    if not np.any(outs):
        return r_t
    out = network.forward(model.net_cfg, params, r_t, v, t)
    return T.add(T.mul(r_t, _per_sample(skip, n, dtype)), T.mul(out, _per_sample(outs, n, dtype)))


def huber_constant(dim: int) -> float:
    return 0.00054 * math.sqrt(dim)


def pseudo_huber(a, b, c: float, per_sample: bool = False) -> Tensor:
    """sqrt(||a - b||^2 + c^2) - c over all elements, or per leading index."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"pseudo_huber: shapes {a.shape} and {b.shape} differ")
    if c <= 0:
        raise ValueError(f"pseudo_huber needs c > 0, got {c}")
    diff = T.sub(a, b)
    axes = tuple(range(1, a.ndim)) if per_sample else None
    sq = T.tsum(T.mul(diff, diff), axis=axes)
    return T.shift(T.sqrt(T.shift(sq, c * c)), -c)


def cct_loss(model: ConsistencyModel, r, v, n, levels: Sequence[float], z, huber_c: float | None = None) -> Tensor:
    """Batch-mean of lambda(t_n) * d(g_phi(r + t_{n+1} z, t_{n+1}), g_phi-(r + t_n z, t_n)).

    ``n`` is 1-based like the levels t_1..t_N, one entry per batch element
    (or a scalar for a single C×H×W pair). The teacher branch runs outside
    the recording context, so no gradient reaches ``teacher_params``.
    """
    r = np.asarray(T.as_tensor(r).data)
    v = np.asarray(T.as_tensor(v).data)
    z = np.asarray(T.as_tensor(z).data)
    single = r.ndim == 3
    if single:
        r, v, z = r[None], v[None], z[None]
    if r.shape != v.shape or r.shape != z.shape:
        raise ShapeError(f"cct_loss: r {r.shape}, v {v.shape}, z {z.shape} must match")
    bsz = r.shape[0]
    levels = np.asarray(levels, dtype=np.float64)
    n = np.broadcast_to(np.asarray(n), (bsz,)).astype(np.int64)
    if np.any(n < 1) or np.any(n > len(levels) - 1):
        raise ValueError(f"n={n.tolist()} outside [1, {len(levels) - 1}]")
    t_lo = levels[n - 1]
    t_hi = levels[n]
    lam = 1.0 / (t_hi - t_lo)
    c = huber_c if huber_c is not None else huber_constant(int(np.prod(r.shape[1:])))
    dtype = model.params["conv_in.weight"].dtype

    shape = (bsz, 1, 1, 1)
    r_hi = (r + t_hi.reshape(shape) * z).astype(dtype)
    r_lo = (r + t_lo.reshape(shape) * z).astype(dtype)
    vt = v.astype(dtype)
    with T.no_record():
        target = g(model, Tensor(r_lo), Tensor(vt), t_lo, use_teacher=True).data
    pred = g(model, Tensor(r_hi), Tensor(vt), t_hi)
    d = pseudo_huber(pred, Tensor(target), c, per_sample=True)
    return T.mean(T.mul(d, Tensor(lam.astype(dtype))))


@dataclass(frozen=True)
class Probe:
    """Fixed (r, v, z, n) draws for tracking self-consistency across training."""

    r: np.ndarray
    v: np.ndarray
    z: np.ndarray
    n: np.ndarray
    levels: np.ndarray


def make_probe(pairs, sched: NoiseSchedule, n_levels: int, seed: int = 0) -> Probe:
    rng = np.random.default_rng(seed)
    r = np.stack([p.r for p in pairs])
    v = np.stack([p.v for p in pairs])
    z = rng.standard_normal(r.shape, dtype=np.float32)
    n = rng.integers(1, n_levels, size=len(pairs))
    return Probe(r, v, z, n, discretize(sched, n_levels))


def consistency_gap(model: ConsistencyModel, probe: Probe, huber_c: float | None = None) -> float:
    """Mean d(g(r + t_{n+1} z, t_{n+1}), g(r + t_n z, t_n)) with the student on both sides."""
    t_lo = probe.levels[probe.n - 1]
    t_hi = probe.levels[probe.n]
    shape = (len(probe.n), 1, 1, 1)
    c = huber_c if huber_c is not None else huber_constant(int(np.prod(probe.r.shape[1:])))
    dtype = model.params["conv_in.weight"].dtype
    with T.no_record():
        hi = g(model, (probe.r + t_hi.reshape(shape) * probe.z).astype(dtype), probe.v.astype(dtype), t_hi)
        lo = g(model, (probe.r + t_lo.reshape(shape) * probe.z).astype(dtype), probe.v.astype(dtype), t_lo)
        d = pseudo_huber(hi, lo, c, per_sample=True)
    return float(np.mean(d.data, dtype=np.float64))


# --------------------------------------------------------------------------
# optimizers


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def step(self, params: Parameters) -> None:
        lr = None
        for p in params.values():
            if p.grad is None:
                continue
            lr = p.dtype.type(self.lr) if lr is None else lr
            p.data = p.data - lr * p.grad
        self.step_count += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count


class Adam:
    name = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Parameters) -> None:
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for name, p in params.items():
            if p.grad is None:
                continue
            ty = p.dtype.type
            gr = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= ty(self.beta1)
            m += ty(1.0 - self.beta1) * gr
            v *= ty(self.beta2)
            v += ty(1.0 - self.beta2) * (gr * gr)
            step = ty(self.lr / c1) * m / (np.sqrt(v / ty(c2)) + ty(self.eps))
            p.data = p.data - step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r} (expected sgd or adam)")


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    K: int = 5000
    step_cfg: StepScheduleConfig = field(default_factory=StepScheduleConfig)
    huber_c: float | None = None
    batch: int = 8
    optimizer: str = "adam"
    seed: int = 0
    ema_decay: float = 0.0
    log_every: int = 50

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.huber_c is not None and self.huber_c <= 0:
            raise ValueError(f"huber_c must be positive, got {self.huber_c}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.step_cfg.K != self.K:
            raise ValueError(f"step schedule K={self.step_cfg.K} differs from K={self.K}")


class TrainingDiverged(RuntimeError):
    def __init__(self, k: int, n, t_lo, t_hi, loss: float):
        self.k, self.n, self.t_lo, self.t_hi, self.loss = k, n, t_lo, t_hi, loss
        super().__init__(
            f"non-finite loss {loss} at iteration {k}: n={list(n)}, "
            f"t_n={list(np.round(t_lo, 6))}, t_n+1={list(np.round(t_hi, 6))}")


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    model: ConsistencyModel
    optimizer: SGD | Adam
    rng: np.random.Generator
    k: int = 0
    losses: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LogRecord:
    k: int
    steps: int
    loss: float
    wall: float

    def text(self) -> str:
        return f"iter {self.k:6d}  M={self.steps:5d}  loss={self.loss:.6f}  wall={self.wall:.1f}s"

    def row(self) -> str:
        return f"{self.k}\t{self.steps}\t{self.loss:.9g}\t{self.wall:.3f}"


def new_state(model: ConsistencyModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(cfg.optimizer, cfg.lr), np.random.default_rng(cfg.seed))


def _draw(dataset, rng: np.random.Generator, batch: int, crop: CropSpec | None):
    idx = rng.integers(0, len(dataset), size=batch)
    pairs = [dataset[int(i)] for i in idx]
    if crop is not None:
        pairs = [apply_crop(p, crop, rng) for p in pairs]
    return np.stack([p.v for p in pairs]), np.stack([p.r for p in pairs])


def train_step(state: TrainState, dataset, cfg: TrainConfig, crop: CropSpec | None = None) -> tuple[float, int]:
    """One iteration of CCT; returns (loss, M(k))."""
    model = state.model
    rng = state.rng
    k = state.k
    steps = steps_at(cfg.step_cfg, k)
    levels = discretize(model.sched, steps)
    v, r = _draw(dataset, rng, cfg.batch, crop)
    n = rng.integers(1, steps, size=cfg.batch)
    z = rng.standard_normal(r.shape, dtype=np.float32)

    with T.record():
        loss = cct_loss(model, r, v, n, levels, z, huber_c=cfg.huber_c)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(k, n, levels[n - 1], levels[n], value)
        T.backward(loss)
    state.optimizer.step(model.params)
    for p in model.params.values():
        p.grad = None

    if cfg.ema_decay > 0:
        mu = cfg.ema_decay
        for name, p in model.params.items():
            tp = model.teacher_params[name]
            tp.data = (mu * tp.data + (1 - mu) * p.data).astype(p.dtype)
    else:
        for name, p in model.params.items():
            model.teacher_params[name].data = p.data.copy()
    state.k += 1
    state.losses.append(value)
    return value, steps


def train(dataset, cfg: TrainConfig, model: ConsistencyModel | None = None, *,
          net_cfg: UNetConfig | None = None, sched: NoiseSchedule | None = None,
          state: TrainState | None = None, callbacks: Sequence[Callable] = (),
          crop: CropSpec | None = None, stop_at: int | None = None) -> TrainState:
    """Run CCT from ``state`` (or a fresh model) until iteration K (or ``stop_at``).

    Each callback is called as ``cb(state, record)`` once per log interval
    and once more after the final iteration.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    if state is None:
        if model is None:
            model = ConsistencyModel.create(net_cfg or UNetConfig(), sched or NoiseSchedule(), seed=cfg.seed)
        state = new_state(model, cfg)
    end = cfg.K if stop_at is None else min(stop_at, cfg.K)
    t0 = time.perf_counter()
    window: list[float] = []
    rec = None
    while state.k < end:
        value, steps = train_step(state, dataset, cfg, crop)
        window.append(value)
        if state.k % cfg.log_every == 0 or state.k == end:
            rec = LogRecord(state.k, steps, float(np.mean(window)), time.perf_counter() - t0)
            window.clear()
            log.info(rec.text())
            for cb in callbacks:
                cb(state, rec)
    return state
