"""No-reference fusion statistics, source-consistency MSE/PSNR, and dataset mIoU.

Colour inputs are reduced to gray with ``imaging.to_gray``; 2-D inputs are
taken as gray already. Pixel range is [0, 1] with peak 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ditfuse.imaging import ShapeMismatch, to_gray


class LengthMismatch(ValueError):
    pass


def gray(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    return to_gray(a)


def mse_psnr(fused, src_a, src_b) -> tuple[float, float]:
    """MSE against both sources averaged, and PSNR = 10 log10(1 / mse); ``inf`` when mse is 0."""
    f, a, b = gray(fused), gray(src_a), gray(src_b)
    if not (f.shape == a.shape == b.shape):
        raise ShapeMismatch(f"shapes differ: {f.shape}, {a.shape}, {b.shape}")
    mse = 0.5 * (float(np.mean((f - a) ** 2)) + float(np.mean((f - b) ** 2)))
    return mse, psnr(mse)


def psnr(mse: float) -> float:
    if mse < 0:
        raise ValueError("mse must be >= 0")
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def entropy(img) -> float:
    """Shannon entropy in bits of the 256-bin histogram of round(gray * 255)."""
    g = gray(img)
    if g.size == 0:
        raise ValueError("empty image")
    levels = np.clip(np.rint(g * 255.0), 0, 255).astype(np.int64)
    p = np.bincount(levels.ravel(), minlength=256) / levels.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def sd(img) -> float:
    g = gray(img)
    if g.size == 0:
        raise ValueError("empty image")
    return float(g.std())


def _check_2x2(g: np.ndarray) -> None:
    if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError(f"need an image of at least 2x2, got {g.shape}")


def spatial_frequency(img) -> float:
    g = gray(img)
    _check_2x2(g)
    rf2 = float(np.mean(np.diff(g, axis=1) ** 2))
    cf2 = float(np.mean(np.diff(g, axis=0) ** 2))
    return math.sqrt(rf2 + cf2)


def average_gradient(img) -> float:
    """Mean of sqrt((dx^2 + dy^2) / 2) with forward differences on the (H-1) x (W-1) interior."""
    g = gray(img)
    _check_2x2(g)
    dx = g[:-1, 1:] - g[:-1, :-1]
    dy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


FUSION_COLUMNS = ("mse", "psnr", "en", "sd", "sf", "ag")


def fusion_row(fused, src_a, src_b) -> dict[str, float]:
    mse, p = mse_psnr(fused, src_a, src_b)
    return {
        "mse": mse,
        "psnr": p,
        "en": entropy(fused),
        "sd": sd(fused),
        "sf": spatial_frequency(fused),
        "ag": average_gradient(fused),
    }


@dataclass(frozen=True)
class IoUReport:
    per_class: dict[int, float]  # classes with an empty union are absent
    mean: float


def miou(preds: Sequence, gts: Sequence, classes: Sequence[int]) -> IoUReport:
    """Dataset-level IoU per class (intersections and unions summed over samples), then the mean.

    Each element is an integer label map; boolean masks are read as
    classes {0: background, 1: foreground}.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    inter = dict.fromkeys(classes, 0)
    union = dict.fromkeys(classes, 0)
    for p, g in zip(preds, gts):
        p = np.asarray(p).astype(np.int64)
        g = np.asarray(g).astype(np.int64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
        for c in classes:
            pc, gc = p == c, g == c
            inter[c] += int(np.count_nonzero(pc & gc))
            union[c] += int(np.count_nonzero(pc | gc))
    per = {c: inter[c] / union[c] for c in classes if union[c] > 0}
    if not per:
        raise ValueError("every class has an empty union")
    return IoUReport(per, float(np.mean(list(per.values()))))
