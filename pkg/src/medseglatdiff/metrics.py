"""Segmentation overlap and reconstruction fidelity metrics.

Overlap metrics (dice, iou) operate on strictly binary masks; fidelity
metrics (psnr, ssim) operate on real grids in [0, 1]. All are symmetric
pure functions computed in 64-bit floats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0


def _as_binary(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1), found values {vals[:8]}")
    return m.astype(bool)


def _check_same_shape(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); 1.0 when both masks are empty."""
    _check_same_shape(a, b)
    a = _as_binary(a, "a")
    b = _as_binary(b, "b")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def iou(a, b) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    _check_same_shape(a, b)
    a = _as_binary(a, "a")
    b = _as_binary(b, "b")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] grids, capped at 100 dB."""
    _check_same_shape(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    radius = (window - 1) // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over Gaussian-windowed local statistics.

    Dynamic range is fixed at 1 (inputs are [0, 1] grids); stabilizers are
    C1 = (k1)^2 and C2 = (k2)^2. Local means/variances use an 11-tap
    Gaussian window (sigma 1.5) and the map is averaged over the region
    where the window fits entirely. Multi-channel grids are averaged over
    channels.
    """
    _check_same_shape(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 3:
        return float(np.mean([ssim(x[..., c], y[..., c], window, sigma, k1, k2)
                              for c in range(x.shape[-1])]))
    if x.ndim != 2:
        raise ValueError(f"ssim expects 2-d or 3-d grids, got ndim={x.ndim}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than ssim window {window}")

    k = _gaussian_kernel(window, sigma)
    w = np.outer(k, k)

    def smooth(a):
        return convolve2d(a, w, mode="valid")

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x**2
    var_y = smooth(y * y) - mu_y**2
    cov = smooth(x * y) - mu_x * mu_y

    c1 = k1**2
    c2 = k2**2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    """Per-sample metric records plus their unweighted means."""

    per_sample: list[dict] = field(default_factory=list)

    def _mean(self, key: str) -> float:
        if not self.per_sample:
            raise ValueError("empty report")
        return float(np.mean([r[key] for r in self.per_sample]))

    @property
    def dice(self) -> float:
        return self._mean("dice")

    @property
    def iou(self) -> float:
        return self._mean("iou")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def psnr(self) -> float:
        return self._mean("psnr")


def evaluate_masks(sample_ids, predictions, truths) -> MetricsReport:
    """Score each predicted binary mask against its ground truth.

    ssim/psnr are computed on the binary grids viewed as [0, 1] images.
    """
    if not (len(sample_ids) == len(predictions) == len(truths)):
        raise ValueError("sample_ids, predictions, truths must have equal length")
    report = MetricsReport()
    for sid, pred, true in zip(sample_ids, predictions, truths):
        pred_f = np.asarray(pred, dtype=np.float64)
        true_f = np.asarray(true, dtype=np.float64)
        report.per_sample.append({
            "sample_id": str(sid),
            "dice": dice(pred, true),
            "iou": iou(pred, true),
            "ssim": ssim(pred_f, true_f),
            "psnr": psnr(pred_f, true_f),
        })
    return report


METRIC_CSV_COLUMNS = ("sample_id", "dice", "iou", "ssim", "psnr")


def write_metrics_csv(report: MetricsReport, path, config_hash: str | None = None) -> None:
    """Write per-sample rows plus a trailing aggregate row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(METRIC_CSV_COLUMNS)
        for rec in report.per_sample:
            writer.writerow([rec["sample_id"]] + [f"{rec[k]:.6f}" for k in METRIC_CSV_COLUMNS[1:]])
        writer.writerow(["aggregate"] + [f"{getattr(report, k):.6f}" for k in METRIC_CSV_COLUMNS[1:]])
