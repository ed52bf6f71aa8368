"""PSNR and Gaussian-window SSIM, plus dataset-level evaluation."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import LUMA, PairedSample, center_crop_pair, resize, to_unit

WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / MSE); +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if max_val <= 0:
        raise ValueError(f"psnr: max_val must be positive, got {max_val}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w1: np.ndarray) -> np.ndarray:
    k = w1.size
    rows = sliding_window_view(img, k, axis=1) @ w1
    return sliding_window_view(rows, k, axis=0) @ w1


def _ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    w1 = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, w1)
    mu_b = _filter_valid(b, w1)
    var_a = _filter_valid(a * a, w1) - mu_a * mu_a
    var_b = _filter_valid(b * b, w1) - mu_b * mu_b
    cov = _filter_valid(a * b, w1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a 3-channel C×H×W image; 1-channel images pass through."""
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] != 3:
        raise ValueError(f"luma conversion needs 1 or 3 channels, got {img.shape[0]}")
    return np.tensordot(LUMA, img, axes=1)


def ssim(a, b, data_range: float = 1.0, mode: str = "luma") -> float:
    """Mean SSIM over all valid 11×11 Gaussian windows (sigma 1.5).

    ``mode`` is ``"luma"`` (BT.601 grayscale first) or ``"channel"`` (mean of
    per-channel SSIM). H×W inputs are used as-is.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[-2:]) < WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {WINDOW}x{WINDOW} window")
    if a.ndim == 2:
        return _ssim_plane(a, b, data_range)
    if mode == "luma":
        return _ssim_plane(to_gray(a), to_gray(b), data_range)
    if mode == "channel":
        return float(np.mean([_ssim_plane(x, y, data_range) for x, y in zip(a, b)]))
    raise ValueError(f"ssim: unknown mode {mode!r}")


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    mode: str = "crop"

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(self.psnr) / self.count if self.count else math.nan

    @property
    def mean_ssim(self) -> float:
        return math.fsum(self.ssim) / self.count if self.count else math.nan

    def lines(self) -> list[str]:
        out = [f"# eval mode={self.mode} count={self.count}",
               f"# mean_psnr_db={_fmt(self.mean_psnr)} mean_ssim={_fmt(self.mean_ssim)}",
               "id\tpsnr_db\tssim"]
        out += [f"{i}\t{_fmt(p)}\t{_fmt(s)}" for i, p, s in zip(self.ids, self.psnr, self.ssim)]
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _fmt(x: float) -> str:
    return "inf" if x == math.inf else f"{x:.6f}"


def item_seed(seed: int, item_id: str) -> int:
    """Per-item sampling seed that does not depend on dataset order."""
    return (seed + zlib.crc32(item_id.encode())) % (2 ** 32)


Generator = Callable[[np.ndarray, int], np.ndarray]


def evaluate(dataset: Sequence[PairedSample], model, *, mode: str = "crop", size: int | None = None,
             seed: int = 0, ssim_mode: str = "luma") -> MetricReport:
    """Sample once per condition and score against the target on a [0, 1] scale.

    ``model`` is a ConsistencyModel or any ``f(v, seed) -> image`` callable.
    In ``crop`` mode pairs larger than ``size`` are centre-cropped; in
    ``full-resize`` mode whole images are resized to ``size``.
    """
    if mode not in ("crop", "full-resize"):
        raise ValueError(f"unknown eval mode {mode!r}")
    if len(dataset) == 0:
        raise ValueError("evaluate needs a non-empty dataset")
    gen = model if callable(model) else _sampler(model)
    report = MetricReport(mode=mode)
    for pair in dataset:
        if size is not None:
            if mode == "crop" and min(pair.shape[1:]) > size:
                pair = center_crop_pair(pair, size)
            elif mode == "full-resize":
                pair = PairedSample(resize(pair.v, size), resize(pair.r, size), pair.id)
        out = gen(pair.v, item_seed(seed, pair.id))
        a, b = to_unit(out), to_unit(pair.r)
        report.ids.append(pair.id)
        report.psnr.append(psnr(a, b, 1.0))
        report.ssim.append(ssim(a, b, 1.0, ssim_mode))
    return report


def _sampler(model) -> Generator:
    from .sampling import SampleRequest, sample_single_step

    return lambda v, s: sample_single_step(model, SampleRequest(v, s))
