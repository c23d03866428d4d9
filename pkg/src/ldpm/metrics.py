"""Image quality metrics (PSNR, SSIM) and dataset-level evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .data import Sample


def _to_np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x_hat, x, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: ``10 log10(peak^2 / MSE)``.

    A zero MSE (identical images) is reported as ``math.inf``.
    """
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    a, b = _to_np(x_hat), _to_np(x)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    x_hat,
    x,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with a Gaussian-weighted window.

    Local (Gaussian-weighted) means, variances and covariance are computed
    for every window fully inside the image; the SSIM map is averaged over
    that valid region only.
    """
    a, b = _to_np(x_hat), _to_np(x)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} SSIM window")

    w = _gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def win_mean(img):
        return fftconvolve(img, w, mode="valid")

    mu_a = win_mean(a)
    mu_b = win_mean(b)
    var_a = win_mean(a * a) - mu_a**2
    var_b = win_mean(b * b) - mu_b**2
    cov = win_mean(a * b) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-sample and aggregate metrics for one reconstruction method."""

    method: str
    sample_indices: list[int]
    psnr_values: list[float]
    ssim_values: list[float]
    config_hash: str = ""
    seed: int | None = None
    dataset_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def summary(self) -> dict:
        return {
            "method": self.method,
            "n_samples": len(self.psnr_values),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset_id": self.dataset_id,
            **self.extra,
        }


def evaluate(
    reconstructor: Callable[[Sample], "np.ndarray"],
    samples: Sequence[Sample],
    method: str = "method",
    peak: float = 1.0,
    config_hash: str = "",
    seed: int | None = None,
    dataset_id: str = "",
) -> MetricReport:
    """Run a reconstructor over a dataset and collect PSNR/SSIM.

    Args:
        reconstructor: maps a :class:`Sample` to an (H, W) magnitude image.
        samples: evaluation set; must be nonempty.
        method: label recorded in the report.
        peak: PSNR peak value (1.0 for unit-range images).

    Returns:
        A :class:`MetricReport`; aggregates are arithmetic means of the
        per-sample values.
    """
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    indices, psnrs, ssims = [], [], []
    for s in samples:
        recon = _to_np(reconstructor(s))
        gt = _to_np(s.ground_truth)
        indices.append(s.index)
        psnrs.append(psnr(recon, gt, peak=peak))
        ssims.append(ssim(recon, gt, data_range=peak))
    return MetricReport(
        method=method,
        sample_indices=indices,
        psnr_values=psnrs,
        ssim_values=ssims,
        config_hash=config_hash,
        seed=seed,
        dataset_id=dataset_id,
    )


def write_reports_csv(reports: Sequence[MetricReport], path: str | Path) -> None:
    """Per-sample rows for one or more methods (Table-style CSV)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "sample_index", "psnr", "ssim"])
        for r in reports:
            for i, p, s in zip(r.sample_indices, r.psnr_values, r.ssim_values):
                writer.writerow([r.method, i, f"{p:.6f}", f"{s:.6f}"])


def write_summary_csv(reports: Sequence[MetricReport], path: str | Path) -> None:
    """Aggregate rows, one per method."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mean_psnr", "mean_ssim"])
        for r in reports:
            writer.writerow([r.method, f"{r.mean_psnr:.6f}", f"{r.mean_ssim:.6f}"])


def write_reports_json(reports: Sequence[MetricReport], path: str | Path) -> None:
    payload = {
        "reports": [r.summary() for r in reports],
        "per_sample": {
            r.method: {
                "indices": r.sample_indices,
                "psnr": r.psnr_values,
                "ssim": r.ssim_values,
            }
            for r in reports
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
