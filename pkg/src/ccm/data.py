"""Paired datasets: procedural generators, folder ingestion and aligned crops.

Images are float32 C×H×W arrays in [-1, 1]. 8-bit files map through
``x / 127.5 - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PairedSample:
    v: np.ndarray
    r: np.ndarray
    id: str

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float32)
        r = np.asarray(self.r, dtype=np.float32)
        if v.ndim != 3 or v.shape != r.shape:
            raise ValueError(f"pair {self.id}: condition {v.shape} and target {r.shape} must be equal C×H×W")
        for name, a in (("v", v), ("r", r)):
            if not np.all(np.isfinite(a)) or a.min() < -1.0 or a.max() > 1.0:
                raise ValueError(f"pair {self.id}: {name} values outside [-1, 1]")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "r", r)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.v.shape


@dataclass(frozen=True)
class CropSpec:
    size: int | None = None
    mode: str = "none"
    resize_to: int | None = None

    def __post_init__(self):
        if self.mode not in ("random", "center", "none"):
            raise ValueError(f"crop mode must be random, center or none, got {self.mode!r}")
        if self.mode != "none" and (self.size is None or self.size < 1):
            raise ValueError(f"crop mode {self.mode!r} needs a positive size")


def to_signed(x01: np.ndarray) -> np.ndarray:
    return (np.asarray(x01, dtype=np.float32) * 2.0 - 1.0).clip(-1.0, 1.0)


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# --------------------------------------------------------------------------
# procedural images


def procedural_image(rng: np.random.Generator, size: int, channels: int = 3) -> np.ndarray:
    """Well-exposed scene in [0, 1]: a colour gradient plus anti-aliased shapes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - size / 2) * np.cos(ang) + (yy - size / 2) * np.sin(ang)) / size + 0.5
    c0 = rng.uniform(0.25, 0.9, channels)
    c1 = rng.uniform(0.25, 0.9, channels)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.1, 1.0, channels)[:, None, None]
        cx, cy = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            rad = rng.uniform(size / 10, size / 3)
            sdf = np.hypot(xx - cx, yy - cy) - rad
        else:
            hw, hh = rng.uniform(size / 10, size / 3, 2)
            qx, qy = np.abs(xx - cx) - hw, np.abs(yy - cy) - hh
            sdf = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
        cover = np.clip(0.5 - sdf, 0.0, 1.0)
        img = img * (1 - cover) + color * cover
    return np.clip(img, 0.0, 1.0)


def degrade_lowlight(r01: np.ndarray, gamma: float, gain: float, sigma: float,
                     rng: np.random.Generator) -> np.ndarray:
    """clip(gain * r^gamma + N(0, sigma^2)) in [0, 1] space."""
    noise = rng.standard_normal(r01.shape) * sigma if sigma > 0 else 0.0
    return np.clip(gain * r01 ** gamma + noise, 0.0, 1.0)


def heat_transform(v01: np.ndarray) -> np.ndarray:
    """Fixed luma-driven pseudo-thermal colour map of a [0, 1] RGB image."""
    luma = np.tensordot(LUMA[: v01.shape[0]] / LUMA[: v01.shape[0]].sum(), v01, axes=1)
    h = luma * luma * (3.0 - 2.0 * luma)
    chans = [h, h * h, 0.5 - 0.5 * np.cos(2.0 * np.pi * h)]
    return np.stack([chans[i % 3] for i in range(v01.shape[0])])


def lowlight_pair(seed: int, index: int, size: int, channels: int = 3, *, gamma: float | None = None,
                  gain: float | None = None, sigma: float | None = None) -> PairedSample:
    rng = _item_rng(seed, index)
    r01 = procedural_image(rng, size, channels)
    gm = rng.uniform(2.0, 5.0)
    gn = rng.uniform(0.1, 0.4)
    sg = rng.uniform(0.01, 0.05)
    v01 = degrade_lowlight(r01, gm if gamma is None else gamma, gn if gain is None else gain,
                           sg if sigma is None else sigma, rng)
    return PairedSample(to_signed(v01), to_signed(r01), f"lowlight-{seed}-{index:06d}")


def synth_lowlight(seed: int, count: int, size: int, channels: int = 3, **overrides) -> list[PairedSample]:
    """Procedural low-light enhancement pairs (v dark and noisy, r well exposed)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    return [lowlight_pair(seed, i, size, channels, **overrides) for i in range(count)]


def modality_pair(seed: int, index: int, size: int, channels: int = 3) -> PairedSample:
    v01 = procedural_image(_item_rng(seed, index), size, channels)
    return PairedSample(to_signed(v01), to_signed(heat_transform(v01)), f"modality-{seed}-{index:06d}")


def synth_modality(seed: int, count: int, size: int, channels: int = 3) -> list[PairedSample]:
    """Procedural visible→pseudo-thermal translation pairs."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    return [modality_pair(seed, i, size, channels) for i in range(count)]


# --------------------------------------------------------------------------
# crops and resizing


def crop_offsets(h: int, w: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image extent {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def random_crop_pair(pair: PairedSample, size: int, rng: np.random.Generator) -> PairedSample:
    """Crop v and r with one shared window."""
    _, h, w = pair.shape
    oy, ox = crop_offsets(h, w, size, rng)
    win = (slice(None), slice(oy, oy + size), slice(ox, ox + size))
    return PairedSample(pair.v[win], pair.r[win], pair.id)


def center_crop_pair(pair: PairedSample, size: int) -> PairedSample:
    _, h, w = pair.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image extent {h}x{w}")
    oy, ox = (h - size) // 2, (w - size) // 2
    win = (slice(None), slice(oy, oy + size), slice(ox, ox + size))
    return PairedSample(pair.v[win], pair.r[win], pair.id)


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a C×H×W image to size×size."""
    if img.shape[1] == size and img.shape[2] == size:
        return img
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F")
                        .resize((size, size), Image.BILINEAR)) for c in img]
    return np.clip(np.stack(chans), -1.0, 1.0).astype(np.float32)


def apply_crop(pair: PairedSample, crop: CropSpec, rng: np.random.Generator | None = None) -> PairedSample:
    if crop.mode == "random":
        pair = random_crop_pair(pair, crop.size, rng if rng is not None else np.random.default_rng(0))
    elif crop.mode == "center":
        pair = center_crop_pair(pair, crop.size)
    if crop.resize_to is not None:
        pair = PairedSample(resize(pair.v, crop.resize_to), resize(pair.r, crop.resize_to), pair.id)
    return pair


# --------------------------------------------------------------------------
# image files


def read_image(path, channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    u8 = to_uint8(img)
    im = Image.fromarray(u8[0], mode="L") if u8.shape[0] == 1 else Image.fromarray(u8.transpose(1, 2, 0), mode="RGB")
    im.save(path, format="PNG")


@dataclass
class LoadReport:
    pairs: int = 0
    only_v: list[str] = field(default_factory=list)
    only_r: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)


def _stems(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def load_paired_folder(dir_v, dir_r, crop: CropSpec = CropSpec(), channels: int = 3,
                       rng: np.random.Generator | None = None) -> tuple[list[PairedSample], LoadReport]:
    """Pair images from two folders by identical filename stem."""
    dir_v, dir_r = Path(dir_v), Path(dir_r)
    for d in (dir_v, dir_r):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    sv, sr = _stems(dir_v), _stems(dir_r)
    common = sorted(sv.keys() & sr.keys())
    report = LoadReport(only_v=sorted(sv.keys() - sr.keys()), only_r=sorted(sr.keys() - sv.keys()))
    if not common:
        raise ValueError(f"no filename stems shared by {dir_v} and {dir_r}")
    out = []
    for stem in common:
        try:
            v = read_image(sv[stem], channels)
            r = read_image(sr[stem], channels)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", stem, exc)
            report.skipped.append((stem, str(exc)))
            continue
        if v.shape != r.shape:
            msg = f"extent mismatch {v.shape} vs {r.shape}"
            log.warning("skipping %s: %s", stem, msg)
            report.skipped.append((stem, msg))
            continue
        out.append(apply_crop(PairedSample(v, r, stem), crop, rng))
    report.pairs = len(out)
    log.info("paired %d images from %s and %s (%d skipped)", len(out), dir_v, dir_r, len(report.skipped))
    if not out:
        raise ValueError(f"no decodable pairs in {dir_v} and {dir_r}")
    return out, report


def write_dataset(pairs: list[PairedSample], out_dir) -> Path:
    """Write v/<id>.png, r/<id>.png and a tab-separated manifest."""
    out_dir = Path(out_dir)
    (out_dir / "v").mkdir(parents=True, exist_ok=True)
    (out_dir / "r").mkdir(parents=True, exist_ok=True)
    rows = ["id\tv_path\tr_path\tshape"]
    for p in pairs:
        write_image(out_dir / "v" / f"{p.id}.png", p.v)
        write_image(out_dir / "r" / f"{p.id}.png", p.r)
        rows.append(f"{p.id}\tv/{p.id}.png\tr/{p.id}.png\t{'x'.join(map(str, p.shape))}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest
