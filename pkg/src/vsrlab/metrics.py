"""Quality evaluation: PSNR/SSIM on the BT.601 luma plane, per-frame
histories and per-video/per-set aggregation.

Model outputs are clamped to [0,1] before metric computation; both metrics
operate on the 0-255 luma plane. PSNR of identical frames is capped at
100 dB so aggregates stay well-defined.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .model import FlowWarpVSR, frame_number_channel
from .videocore import VideoError, rgb_to_y

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _luma255(frame: np.ndarray) -> np.ndarray:
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return rgb_to_y(frame)[..., 0] * 255.0


def psnr_luma(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two 0-255 luma planes; identical planes cap at
    100 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64)
                         - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(255.0 ** 2 / mse)), PSNR_CAP_DB)


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two [H,W,3] frames on the 0-255 luma plane."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise VideoError(f"shape mismatch: {a.shape} vs {b.shape}")
    return psnr_luma(_luma255(a), _luma255(b))


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _windowed_mean(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = convolve2d(img, k[:, None], mode="valid")
    return convolve2d(out, k[None, :], mode="valid")


def ssim_y(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM between two [H,W,3] frames on the 0-255 luma plane.

    Gaussian 11x11 window with sigma 1.5, K1=0.01, K2=0.03; the map is
    averaged over all valid window positions.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise VideoError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = _luma255(a)
    y = _luma255(b)
    if min(x.shape) < SSIM_WINDOW:
        raise VideoError(
            f"frame {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    k = _ssim_window()
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2
    mu_x = _windowed_mean(x, k)
    mu_y = _windowed_mean(y, k)
    var_x = _windowed_mean(x * x, k) - mu_x * mu_x
    var_y = _windowed_mean(y * y, k) - mu_y * mu_y
    cov = _windowed_mean(x * y, k) - mu_x * mu_y
    ssim_map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


@dataclass
class MetricSeries:
    """Per-frame PSNR/SSIM history of one video plus its aggregates."""

    video_id: str
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def __len__(self) -> int:
        return len(self.psnr)


def super_resolve(model: FlowWarpVSR, lr_video: torch.Tensor,
                  init_kind: str = "zeros") -> torch.Tensor:
    """Run the model over a whole [T,h,w,C] LR video from its standard
    (zeros) initial state; returns the clamped [T,H,W,C] SR video."""
    cond_spec = model.spec.condition
    t_total, h, w, _ = lr_video.shape
    with torch.no_grad():
        state = model.initial_state(1, h, w, init_kind)
        frames = []
        for t in range(t_total):
            cond = None
            if cond_spec.enabled:
                cond = frame_number_channel(t, cond_spec, h, w,
                                            dtype=lr_video.dtype,
                                            device=lr_video.device)
            sr, state = model.step(lr_video[t].unsqueeze(0), state, cond)
            frames.append(sr.squeeze(0).clamp(0.0, 1.0))
    return torch.stack(frames)


def per_frame_history(model: FlowWarpVSR, lr_video: torch.Tensor,
                      hr_video: torch.Tensor, video_id: str = "video",
                      init_kind: str = "zeros") -> MetricSeries:
    """Per-frame PSNR/SSIM of the model across a whole video."""
    if lr_video.shape[0] != hr_video.shape[0]:
        raise VideoError(
            f"LR/HR length mismatch: {lr_video.shape[0]} vs {hr_video.shape[0]}"
        )
    sr = super_resolve(model, lr_video, init_kind=init_kind)
    if sr.shape != hr_video.shape:
        raise VideoError(
            f"SR shape {tuple(sr.shape)} incompatible with HR {tuple(hr_video.shape)}"
        )
    psnr, ssim = [], []
    hr_np = hr_video.numpy() if isinstance(hr_video, torch.Tensor) else hr_video
    for t in range(sr.shape[0]):
        sr_t = sr[t].numpy()
        psnr.append(psnr_y(sr_t, hr_np[t]))
        ssim.append(ssim_y(sr_t, hr_np[t]))
    return MetricSeries(video_id=video_id, psnr=psnr, ssim=ssim)


def evaluate_set(model: FlowWarpVSR,
                 dataset: list[tuple[str, torch.Tensor, torch.Tensor]],
                 init_kind: str = "zeros") -> tuple[list[MetricSeries], float, float]:
    """Evaluate (video_id, lr, hr) pairs; returns per-video series plus the
    unweighted set means of the per-video mean PSNR/SSIM."""
    if not dataset:
        raise VideoError("empty evaluation dataset")
    series = [
        per_frame_history(model, lr, hr, video_id=vid, init_kind=init_kind)
        for vid, lr, hr in dataset
    ]
    set_psnr = float(np.mean([s.mean_psnr for s in series]))
    set_ssim = float(np.mean([s.mean_ssim for s in series]))
    return series, set_psnr, set_ssim


def write_series_csv(series: MetricSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(("video_id", "frame", "psnr", "ssim"))
        for t, (p, s) in enumerate(zip(series.psnr, series.ssim)):
            out.writerow((series.video_id, t, repr(float(p)), repr(float(s))))


def read_series_csv(path: str | Path) -> list[MetricSeries]:
    """Read one or more per-frame series from a history CSV."""
    by_id: dict[str, MetricSeries] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            series = by_id.setdefault(
                row["video_id"], MetricSeries(row["video_id"], [], [])
            )
            series.psnr.append(float(row["psnr"]))
            series.ssim.append(float(row["ssim"]))
    return list(by_id.values())


def write_summary_csv(series: list[MetricSeries], set_psnr: float, set_ssim: float,
                      path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(("video_id", "frames", "mean_psnr", "mean_ssim"))
        for s in series:
            out.writerow((s.video_id, len(s), repr(s.mean_psnr), repr(s.mean_ssim)))
        out.writerow(("__set__", sum(len(s) for s in series), repr(set_psnr), repr(set_ssim)))
