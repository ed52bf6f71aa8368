"""Portable binary checkpoint.

Layout, all integers little-endian::

    magic        4 bytes  b"CCMK"
    version      u32      (= 1)
    config_hash  32 bytes sha256 of the canonical training config
    k            u64      iterations completed
    opt_steps    u64      optimizer step counter
    opt_name     u8 length + ASCII
    rng          PCG64 state: u128 state, u128 inc, u32 has_uint32, u32 uinteger
    config       u32 length + UTF-8 canonical config text
    n_arrays     u32
    n_arrays x   u16 name length, UTF-8 name, u32 rank, rank x u32 extents,
                 float32 payload (row-major)
    crc32        u32 over every preceding byte

Array names are prefixed ``param.``, ``teacher.`` or ``adam.m.`` / ``adam.v.``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CCMK"
VERSION = 1
_MASK64 = (1 << 64) - 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: bytes
    k: int
    config_text: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    opt_name: str = "adam"
    opt_steps: int = 0
    rng_state: dict | None = None

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def _u128(x: int) -> bytes:
    return struct.pack("<QQ", x & _MASK64, x >> 64)


def _rng_bytes(state: dict | None) -> bytes:
    if state is None:
        return b"\0" * 40
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state.get('bit_generator')}")
    s = state["state"]
    return _u128(s["state"]) + _u128(s["inc"]) + struct.pack("<II", state["has_uint32"], state["uinteger"])


def _rng_state(buf: bytes) -> dict | None:
    lo, hi, ilo, ihi, has, uint = struct.unpack("<QQQQII", buf)
    if not any((lo, hi, ilo, ihi, has, uint)):
        return None
    return {"bit_generator": "PCG64", "state": {"state": lo | hi << 64, "inc": ilo | ihi << 64},
            "has_uint32": has, "uinteger": uint}


def to_bytes(ck: Checkpoint) -> bytes:
    if len(ck.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), ck.config_hash,
             struct.pack("<QQ", ck.k, ck.opt_steps)]
    name = ck.opt_name.encode("ascii")
    parts.append(struct.pack("<B", len(name)) + name)
    parts.append(_rng_bytes(ck.rng_state))
    cfg = ck.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    parts.append(struct.pack("<I", len(ck.arrays)))
    for key, arr in ck.arrays.items():
        kb = key.encode("utf-8")
        a = np.asarray(arr)
        parts.append(struct.pack(f"<H{len(kb)}sI{a.ndim}I", len(kb), kb, a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 4 + 32 + 16 + 1 + 40 + 4 + 4 + 4 or buf[:4] != MAGIC:
        raise CheckpointError("not a CCMK checkpoint")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt or truncated)")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 8
        chash = buf[off:off + 32]
        off += 32
        k, opt_steps = struct.unpack_from("<QQ", buf, off)
        off += 16
        (nlen,) = struct.unpack_from("<B", buf, off)
        opt_name = buf[off + 1:off + 1 + nlen].decode("ascii")
        off += 1 + nlen
        rng = _rng_state(buf[off:off + 40])
        off += 40
        (clen,) = struct.unpack_from("<I", buf, off)
        config_text = buf[off + 4:off + 4 + clen].decode("utf-8")
        off += 4 + clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            key = buf[off + 2:off + 2 + klen].decode("utf-8")
            off += 2 + klen
            (rank,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arrays[key] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if off != len(buf) - 4:
        raise CheckpointError("trailing bytes after checkpoint arrays")
    return Checkpoint(chash, k, config_text, arrays, opt_name, opt_steps, rng)


def save(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(buf)
