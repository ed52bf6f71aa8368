"""Command line: ``ccm synth-data | train | sample | eval``.

Failures print a single ``ccm: error: <kind>: <message>`` line on stderr and
exit non-zero (2 for configuration errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, metrics
from .config import ConfigError, RunConfig
from .consistency import (ConsistencyModel, LogRecord, TrainingDiverged, TrainState, make_optimizer,
                          train)
from .network import param_shapes
from .sampling import SampleRequest, sample_single_step
from .tensor import ShapeError

log = logging.getLogger("ccm")


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


# --------------------------------------------------------------------------
# checkpoint <-> training state


def state_to_checkpoint(state: TrainState, cfg: RunConfig) -> ckpt.Checkpoint:
    arrays = {f"param.{k}": v.data for k, v in state.model.params.items()}
    arrays.update({f"teacher.{k}": v.data for k, v in state.model.teacher_params.items()})
    arrays.update(state.optimizer.state_arrays())
    return ckpt.Checkpoint(cfg.hash(), state.k, cfg.canonical(hashed_only=True), arrays, state.optimizer.name,
                           state.optimizer.step_count, state.rng.bit_generator.state)


def _check_arrays(ck: ckpt.Checkpoint, cfg: RunConfig, prefix: str) -> dict[str, np.ndarray]:
    got = ck.group(prefix)
    want = param_shapes(cfg.net())
    if {k: v.shape for k, v in got.items()} != want:
        raise ckpt.CheckpointError(f"checkpoint {prefix}* arrays do not match the configured network")
    return got


def model_from_checkpoint(ck: ckpt.Checkpoint, cfg: RunConfig | None = None) -> ConsistencyModel:
    from .tensor import Tensor

    cfg = cfg or RunConfig.from_text(ck.config_text, env={})
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in _check_arrays(ck, cfg, "param.").items()}
    teacher = ck.group("teacher.") or {k: v.data for k, v in params.items()}
    teacher = {k: Tensor(np.asarray(v).copy(), requires_grad=True) for k, v in teacher.items()}
    return ConsistencyModel(params, teacher, cfg.schedule(), cfg.net())


def state_from_checkpoint(ck: ckpt.Checkpoint, cfg: RunConfig) -> TrainState:
    model = model_from_checkpoint(ck, cfg)
    opt = make_optimizer(ck.opt_name, cfg.get("train.lr"))
    opt.load_state({k: v for k, v in ck.arrays.items() if k.startswith("adam.")}, ck.opt_steps)
    rng = np.random.default_rng()
    if ck.rng_state is None:
        raise ckpt.CheckpointError("checkpoint carries no RNG state; cannot resume")
    rng.bit_generator.state = ck.rng_state
    return TrainState(model, opt, rng, ck.k)


def generator_from_checkpoint(ck: ckpt.Checkpoint):
    """``f(v, seed) -> image`` for the checkpointed model."""
    cfg = RunConfig.from_text(ck.config_text, env={})
    if cfg.get("net.kind") == "passthrough":
        return cfg, lambda v, seed: np.array(v, dtype=np.float32, copy=True)
    model = model_from_checkpoint(ck, cfg)
    return cfg, lambda v, seed: sample_single_step(model, SampleRequest(v, seed))


# --------------------------------------------------------------------------
# datasets


def build_dataset(cfg: RunConfig, seed_offset: int = 0):
    task = cfg.get("task")
    seed = cfg.get("seed") + seed_offset
    count, size, ch = cfg.get("data.count"), cfg.get("data.size"), cfg.get("data.channels")
    if task == "synth-lowlight":
        return data.synth_lowlight(seed, count, size, ch)
    if task == "synth-modality":
        return data.synth_modality(seed, count, size, ch)
    crop = cfg.crop()
    load_crop = crop if crop.mode != "random" else data.CropSpec()
    pairs, report = data.load_paired_folder(cfg.values["data.dir_v"], cfg.values["data.dir_r"],
                                            load_crop, ch)
    log.info("paired-folder: %d pairs, %d skipped", report.pairs, len(report.skipped))
    return pairs


# --------------------------------------------------------------------------
# commands


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_cfg(args, need_data=True) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file {args.config} not found")
    cfg = RunConfig.load(args.config, overrides)
    cfg.validate(need_data=need_data)
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_cfg(args, need_data=False)
    if cfg.get("task") == "paired-folder":
        raise ConfigError("task: synth-data needs task synth-lowlight or synth-modality")
    out = Path(args.out or Path(cfg.get("out_dir")) / "data")
    try:
        pairs = build_dataset(cfg)
        manifest = data.write_dataset(pairs, out)
    except OSError as exc:
        raise CLIError("io", f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    print(f"wrote {len(pairs)} pairs to {out} (manifest {manifest})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if cfg.get("net.kind") != "unet":
        raise ConfigError("net.kind: only the unet kind can be trained")
    tcfg = cfg.train()
    out = Path(cfg.get("out_dir"))
    try:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError("io", f"cannot create {out}: {exc.strerror}") from None
    dataset = build_dataset(cfg)
    crop = cfg.crop() if cfg.get("crop.mode") == "random" else None

    if args.resume:
        ck = ckpt.load(args.resume)
        if ck.config_hash != cfg.hash() and not args.force:
            raise CLIError("config", f"checkpoint {args.resume} was written with a different config "
                                     "(use --force to resume anyway)", 2)
        state = state_from_checkpoint(ck, cfg)
        log.info("resuming from iteration %d", state.k)
    else:
        model = ConsistencyModel.create(cfg.net(), cfg.schedule(), seed=cfg.get("seed"))
        state = TrainState(model, make_optimizer(tcfg.optimizer, tcfg.lr), np.random.default_rng(tcfg.seed))

    every = cfg.get("train.checkpoint_every")
    if every and every % tcfg.log_every:
        raise ConfigError("train.checkpoint_every: must be a multiple of train.log_every")
    text_log = open(out / "train.log", "a")
    rows = out / "train_log.tsv"
    new_rows = not rows.exists()
    row_log = open(rows, "a")
    if new_rows:
        row_log.write("iteration\tsteps\tmean_loss\twall_seconds\n")

    def on_log(st: TrainState, rec: LogRecord):
        text_log.write(rec.text() + "\n")
        row_log.write(rec.row() + "\n")
        text_log.flush()
        row_log.flush()
        if not args.quiet:
            print(rec.text(), flush=True)

    def on_ckpt(st: TrainState, rec: LogRecord):
        if every and st.k % every == 0 and st.k < tcfg.K:
            ckpt.save(state_to_checkpoint(st, cfg), out / "checkpoints" / f"ckpt_{st.k:07d}.ccmk")

    callbacks = [on_log, on_ckpt]
    try:
        with _threads(args.threads):
            state = train(dataset, tcfg, state=state, callbacks=callbacks, crop=crop)
    except TrainingDiverged as exc:
        dump = out / "diverged.txt"
        dump.write_text(f"iteration\t{exc.k}\nn\t{list(map(int, exc.n))}\n"
                        f"t_n\t{list(map(float, exc.t_lo))}\nt_n+1\t{list(map(float, exc.t_hi))}\n"
                        f"loss\t{exc.loss}\n")
        raise CLIError("diverged", f"{exc} (diagnostics in {dump})") from None
    finally:
        text_log.close()
        row_log.close()
    final = ckpt.save(state_to_checkpoint(state, cfg), out / "final.ccmk")
    print(f"final checkpoint {final} at iteration {state.k}")
    return 0


def _collect_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += [f for f in sorted(p.iterdir()) if f.suffix.lower() in data.IMAGE_SUFFIXES]
        elif p.is_file():
            files.append(p)
        else:
            raise CLIError("input", f"no such file or directory: {p}")
    if not files:
        raise CLIError("input", "no input images found")
    return files


def cmd_sample(args) -> int:
    ck = ckpt.load(args.checkpoint)
    cfg, gen = generator_from_checkpoint(ck)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _collect_inputs(args.inputs)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    ch = cfg.get("data.channels")
    for i, f in enumerate(files):
        v = data.read_image(f, ch)
        try:
            img = gen(v, seed + i)
        except ShapeError as exc:
            raise CLIError("extent", f"{f}: image {v.shape} incompatible with checkpoint "
                                     f"architecture {cfg.net()}: {exc}") from None
        data.write_image(out / f"{f.stem}_gen.png", img)
    print(f"wrote {len(files)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    cfg, gen = generator_from_checkpoint(ck)
    size = args.size if args.size is not None else cfg.get("data.size")
    try:
        pairs, _ = data.load_paired_folder(args.dir_v, args.dir_r, data.CropSpec(), cfg.get("data.channels"))
    except (ValueError, FileNotFoundError) as exc:
        raise CLIError("data", str(exc)) from None
    seed = args.seed if args.seed is not None else cfg.get("seed")
    try:
        report = metrics.evaluate(pairs, gen, mode=args.mode, size=size, seed=seed, ssim_mode=args.ssim_mode)
    except ShapeError as exc:
        raise CLIError("extent", f"evaluation data incompatible with checkpoint architecture: {exc}") from None
    text = report.text()
    sys.stdout.write(text)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccm", description="Conditional consistency models at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth-data", help="write a synthetic paired dataset")
    with_config(sp)
    sp.add_argument("--out", help="dataset directory (default: <out_dir>/data)")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="run conditional consistency training")
    with_config(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--force", action="store_true", help="resume despite a config hash mismatch")
    sp.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = bitwise reproducible)")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="single-step generation from condition images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("inputs", nargs="+", help="condition images or directories")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="PSNR/SSIM of single-step samples against targets")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dir-v", required=True)
    sp.add_argument("--dir-r", required=True)
    sp.add_argument("--mode", choices=("crop", "full-resize"), default="crop")
    sp.add_argument("--size", type=int, default=None, help="crop / resize extent (default: data.size)")
    sp.add_argument("--ssim-mode", choices=("luma", "channel"), default="luma")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--report", help="also write the report here")
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CLIError as exc:
        err, code = f"{exc.kind}: {exc}", exc.code
    except ConfigError as exc:
        err, code = f"config: {exc}", 2
    except ckpt.CheckpointError as exc:
        err, code = f"checkpoint: {exc}", 1
    except (OSError, ValueError) as exc:
        err, code = f"{type(exc).__name__}: {exc}", 1
    print(f"ccm: error: {' '.join(err.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
