"""Structural similarity (SSIM) and directory-level evaluation.

Gaussian-windowed SSIM with the usual constants (11-tap window, sigma 1.5,
K1=0.01, K2=0.03, unit dynamic range).  Local statistics use 'valid' windows
only; the score is the mean of the local map over positions and channels.
Computation is float64 with separable filtering; `ssim_reference` recomputes
the same quantity with explicit 2-D window sums and is kept as the oracle the
fast path is tested against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PairingError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ShapeError(f"window must be odd and >= 3, got {self.window}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering along the two trailing axes of (C,H,W)."""
    win = kernel.size
    out = sliding_window_view(img, win, axis=1) @ kernel
    out = sliding_window_view(out, win, axis=2) @ kernel
    return out


def _check_pair(a: Tensor, b: Tensor, p: SsimParams):
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 3:
        raise ShapeError(f"ssim: want (C,H,W), got {a.shape}")
    if a.shape[1] < p.window or a.shape[2] < p.window:
        raise ShapeError(f"ssim: image {a.shape[1:]} smaller than window {p.window}")


def ssim_map(a: Tensor, b: Tensor, p: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM map over valid window positions, per channel: (C, H', W')."""
    _check_pair(a, b, p)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kern = _gaussian_kernel(p.window, p.sigma)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    s_aa = _filter_valid(a * a, kern) - mu_a * mu_a
    s_bb = _filter_valid(b * b, kern) - mu_b * mu_b
    s_ab = _filter_valid(a * b, kern) - mu_a * mu_b
    c1, c2 = p.c1, p.c2
    return ((2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2))


def ssim(a: Tensor, b: Tensor, p: SsimParams = SsimParams()) -> float:
    return float(ssim_map(a, b, p).mean())


def ssim_masked(a: Tensor, b: Tensor, mask: Tensor, p: SsimParams = SsimParams()) -> float:
    """Mean of the local SSIM map over window positions centered on masked
    pixels.  `mask` is (H, W) binary in image coordinates."""
    if mask.shape != a.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match image {a.shape}")
    m = ssim_map(a, b, p)
    half = p.window // 2
    centers = np.asarray(mask, dtype=bool)[half:mask.shape[0] - half, half:mask.shape[1] - half]
    if not centers.any():
        raise ShapeError("mask has no pixels inside the valid window region")
    return float(m[:, centers].mean())


def ssim_reference(a: Tensor, b: Tensor, p: SsimParams = SsimParams()) -> float:
    """Direct 2-D window-sum SSIM (no separability); oracle for `ssim`."""
    _check_pair(a, b, p)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k1 = _gaussian_kernel(p.window, p.sigma)
    kern2 = np.outer(k1, k1)

    def windows(img):
        return sliding_window_view(img, (p.window, p.window), axis=(1, 2))

    def wsum(img):
        return np.einsum("chwij,ij->chw", windows(img), kern2)

    mu_a, mu_b = wsum(a), wsum(b)
    s_aa = wsum(a * a) - mu_a * mu_a
    s_bb = wsum(b * b) - mu_b * mu_b
    s_ab = wsum(a * b) - mu_a * mu_b
    c1, c2 = p.c1, p.c2
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2))
    return float(score.mean())


@dataclass
class EvalReport:
    pairs: List[Tuple[str, float]]
    mean: float

    @property
    def count(self) -> int:
        return len(self.pairs)


def evaluate_pairs(pairs: Dict[str, Tuple[Tensor, Tensor]], p: SsimParams = SsimParams()) -> EvalReport:
    names = sorted(pairs)
    scored = [(n, ssim(pairs[n][0], pairs[n][1], p)) for n in names]
    mean = float(np.mean([s for _, s in scored])) if scored else float("nan")
    return EvalReport(pairs=scored, mean=mean)


def evaluate_dir(generated_dir, target_dir, png_read, p: SsimParams = SsimParams(),
                 csv_path=None) -> EvalReport:
    """SSIM over identically named PNG pairs; deterministic filename order.

    Raises PairingError naming the orphans when the directories disagree.
    """
    gen_dir, tgt_dir = Path(generated_dir), Path(target_dir)
    gen = {f.name for f in gen_dir.glob("*.png")}
    tgt = {f.name for f in tgt_dir.glob("*.png")}
    orphans = sorted(gen ^ tgt)
    if orphans:
        raise PairingError(f"unpaired files: {orphans}")
    if not gen:
        raise PairingError(f"no PNG pairs between {gen_dir} and {tgt_dir}")
    report = evaluate_pairs({
        name: (png_read(gen_dir / name, channels=3), png_read(tgt_dir / name, channels=3))
        for name in sorted(gen)
    }, p)
    if csv_path is not None:
        write_eval_csv(csv_path, report)
    return report


def write_eval_csv(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "ssim"])
        for name, score in report.pairs:
            writer.writerow([name, repr(score)])
        writer.writerow(["mean", repr(report.mean)])
