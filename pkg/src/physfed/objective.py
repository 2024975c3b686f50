"""Training losses and image-quality metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor


class ShapeMismatch(ValueError):
    pass


class ImageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


@dataclass(frozen=True)
class MetricRecord:
    client_id: object
    round: int
    split: str
    psnr_mean: float
    ssim_mean: float
    n_samples: int


def _check_shapes(a, b):
    sa = a.shape
    sb = b.shape
    if tuple(sa) != tuple(sb):
        raise ShapeMismatch(f"shape {tuple(sa)} vs {tuple(sb)}")


def mse_loss(pred, ref):
    """Mean squared error; returns a tensor for tensor inputs, else a float."""
    _check_shapes(pred, ref)
    if isinstance(pred, Tensor):
        diff = ad.sub(pred, ref)
        return ad.mean(ad.mul(diff, diff))
    return float(np.mean((np.asarray(pred, float) - np.asarray(ref, float)) ** 2))


def orth_loss(codes, i: int):
    """Sum over j != i of the squared dot product between codes i and j.

    ``codes`` has one code per row; ``i`` is a 0-based row index.
    """
    k = codes.shape[0]
    if not 0 <= i < k:
        raise IndexError(f"client index {i} out of range for {k} codes")
    mask = np.ones((1, k))
    mask[0, i] = 0.0
    if isinstance(codes, Tensor):
        tape = codes.tape
        ci = ad.take(codes, slice(i, i + 1))
        dots = ad.matmul(ci, ad.transpose(codes, (1, 0)))
        return ad.sum_all(ad.mul(ad.mul(dots, dots), tape.leaf(mask)))
    c = np.asarray(codes, dtype=np.float64)
    dots = c[i] @ c.T
    return float(np.sum(dots ** 2 * mask[0]))


def total_loss(pred, ref, codes, i: int, cfg: LossConfig):
    """Imaging MSE plus ``tau`` times the orthogonality penalty."""
    mse = mse_loss(pred, ref)
    if codes is None or cfg.tau == 0:
        return mse
    orth = orth_loss(codes, i)
    if isinstance(mse, Tensor):
        return ad.add(mse, ad.scale(orth, cfg.tau))
    return mse + cfg.tau * orth


def psnr(pred, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_shapes(pred, ref)
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = np.mean((pred - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(pred, ref, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(ref, dtype=np.float64)
    _check_shapes(x, y)
    if min(x.shape) < 11:
        raise ImageTooSmall(f"SSIM needs images of at least 11x11, got {x.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


METRIC_FIELDS = ("client_id", "round", "split", "psnr_mean", "ssim_mean", "n_samples")


def append_metrics(path, records) -> None:
    """Append records to a CSV file, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([r.client_id, r.round, r.split, repr(float(r.psnr_mean)),
                        repr(float(r.ssim_mean)), r.n_samples])


def read_metrics(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        return [MetricRecord(_client_key(row["client_id"]), int(row["round"]), row["split"],
                             float(row["psnr_mean"]), float(row["ssim_mean"]),
                             int(row["n_samples"]))
                for row in csv.DictReader(fh)]


def _client_key(text: str):
    return int(text) if text.lstrip("-").isdigit() else text
