"""Flat ``key = value`` run configuration.

Every key has a default (see ``SCHEMA``); unknown keys are rejected. Lines
starting with ``#`` are comments. The seed falls back to the ``CCM_SEED``
environment variable when neither the file nor ``--set`` provides one.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .consistency import TrainConfig
from .data import CropSpec
from .network import UNetConfig
from .schedule import NoiseSchedule, StepScheduleConfig


class ConfigError(ValueError):
    pass


def _opt_int(s: str):
    return None if s.lower() in ("none", "") else int(s)


def _opt_float(s: str):
    return None if s.lower() in ("auto", "none", "") else float(s)


def _mults(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


# key -> (default text, parser, description)
SCHEMA: dict[str, tuple[str, object, str]] = {
    "task": ("synth-lowlight", str, "synth-lowlight | synth-modality | paired-folder"),
    "seed": ("0", int, "single source of randomness (fallback: CCM_SEED)"),
    "out_dir": ("runs/ccm", str, "output directory for data, checkpoints and logs"),
    "data.count": ("500", int, "number of synthetic pairs"),
    "data.size": ("16", int, "synthetic image extent (pixels)"),
    "data.channels": ("3", int, "image channels C"),
    "data.dir_v": ("", str, "condition folder for task paired-folder"),
    "data.dir_r": ("", str, "target folder for task paired-folder"),
    "crop.mode": ("none", str, "random | center | none"),
    "crop.size": ("none", _opt_int, "crop window extent"),
    "crop.resize_to": ("none", _opt_int, "bilinear resize after cropping"),
    "sched.sigma_min": ("0.002", float, "minimal noise level"),
    "sched.sigma_max": ("80.0", float, "maximal noise level"),
    "sched.rho": ("7.0", float, "discretization curvature exponent"),
    "sched.sigma_data": ("0.5", float, "data scale in the skip/out scalings"),
    "steps.s0": ("10", int, "initial discretization size"),
    "steps.s1": ("1280", int, "final discretization size"),
    "net.kind": ("unet", str, "unet | passthrough (diagnostic: echoes the condition)"),
    "net.base_width": ("32", int, "channels at the first stage"),
    "net.channel_mults": ("1,2", _mults, "per-stage width multipliers"),
    "net.depth": ("1", int, "residual blocks per stage"),
    "net.time_embed_dim": ("64", int, "time embedding width"),
    "train.iterations": ("5000", int, "total iterations K"),
    "train.lr": ("0.001", float, "learning rate"),
    "train.batch": ("8", int, "batch size"),
    "train.optimizer": ("adam", str, "adam | sgd"),
    "train.huber_c": ("auto", _opt_float, "pseudo-Huber c; auto = 0.00054 * sqrt(C*H*W)"),
    "train.ema_decay": ("0.0", float, "teacher EMA decay; 0 copies the student each step"),
    "train.log_every": ("50", int, "iterations per log row"),
    "train.checkpoint_every": ("500", int, "iterations per periodic checkpoint (0 = final only)"),
}

# keys that do not change the trained parameters
UNHASHED = frozenset({"out_dir", "train.log_every", "train.checkpoint_every"})


def desk_profile() -> dict[str, str]:
    """Overrides for minute-scale runs on 16×16 synthetic data."""
    return {"steps.s1": "160"}


@dataclass
class RunConfig:
    values: dict[str, str]

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None, env=None) -> RunConfig:
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        raw.update(overrides or {})
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        env = os.environ if env is None else env
        if "seed" not in raw and env.get("CCM_SEED"):
            raw["seed"] = env["CCM_SEED"]
        values = {k: raw.get(k, d) for k, (d, _, _) in SCHEMA.items()}
        cfg = cls(values)
        cfg.parsed()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None, env=None) -> RunConfig:
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, overrides, env)

    def get(self, key: str):
        parser = SCHEMA[key][1]
        try:
            return parser(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {self.values[key]!r}") from None

    def parsed(self) -> dict:
        return {k: self.get(k) for k in SCHEMA}

    def canonical(self, hashed_only: bool = False) -> str:
        keys = sorted(k for k in self.values if not (hashed_only and k in UNHASHED))
        return "".join(f"{k} = {self.values[k]}\n" for k in keys)

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical(hashed_only=True).encode()).digest()

    # typed views --------------------------------------------------------

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.get("sched.sigma_min"), self.get("sched.sigma_max"),
                             self.get("sched.rho"), self.get("sched.sigma_data"))

    def net(self) -> UNetConfig:
        return UNetConfig(out_channels=self.get("data.channels"), base_width=self.get("net.base_width"),
                          channel_mults=self.get("net.channel_mults"), depth=self.get("net.depth"),
                          time_embed_dim=self.get("net.time_embed_dim"),
                          sigma_data=self.get("sched.sigma_data"))

    def train(self) -> TrainConfig:
        k = self.get("train.iterations")
        return TrainConfig(lr=self.get("train.lr"), K=k,
                           step_cfg=StepScheduleConfig(self.get("steps.s0"), self.get("steps.s1"), k),
                           huber_c=self.get("train.huber_c"), batch=self.get("train.batch"),
                           optimizer=self.get("train.optimizer"), seed=self.get("seed"),
                           ema_decay=self.get("train.ema_decay"), log_every=self.get("train.log_every"))

    def crop(self) -> CropSpec:
        return CropSpec(self.get("crop.size"), self.get("crop.mode"), self.get("crop.resize_to"))

    def validate(self, need_data: bool = True) -> None:
        """Check cross-field constraints; raises ConfigError naming the key."""
        task = self.get("task")
        if task not in ("synth-lowlight", "synth-modality", "paired-folder"):
            raise ConfigError(f"task: unknown task {task!r}")
        if self.get("net.kind") not in ("unet", "passthrough"):
            raise ConfigError(f"net.kind: unknown kind {self.values['net.kind']!r}")
        if self.get("data.count") < 1:
            raise ConfigError(f"data.count: must be >= 1, got {self.get('data.count')}")
        if self.get("data.size") < 8:
            raise ConfigError(f"data.size: must be >= 8, got {self.get('data.size')}")
        if self.get("data.channels") not in (1, 3):
            raise ConfigError("data.channels: must be 1 or 3")
        if self.get("train.log_every") < 1:
            raise ConfigError("train.log_every: must be >= 1")
        if self.get("train.checkpoint_every") < 0:
            raise ConfigError("train.checkpoint_every: must be >= 0")
        steps = lambda: StepScheduleConfig(self.get("steps.s0"), self.get("steps.s1"))
        for getter, key in ((self.schedule, "sched.*"), (steps, "steps.*"), (self.net, "net.*"),
                            (self.train, "train.*"), (self.crop, "crop.*")):
            try:
                getter()
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if need_data and task == "paired-folder":
            for key in ("data.dir_v", "data.dir_r"):
                if not self.values[key] or not Path(self.values[key]).is_dir():
                    raise ConfigError(f"{key}: directory {self.values[key]!r} does not exist")
