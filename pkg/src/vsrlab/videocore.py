"""Video tensors, frame-directory I/O and the HR->LR degradation pipeline.

A video is a [T, H, W, C] float array with intensities in [0, 1]. On disk a
video is a directory of 8-bit RGB images in a lossless raster format whose
lexicographic filename order is the temporal order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d

FRAME_EXTENSIONS = {".png", ".bmp", ".tif", ".tiff"}


class VideoError(ValueError):
    """Raised for malformed videos or frame directories."""


@dataclass(frozen=True)
class VideoTensor:
    """A video as a [T, H, W, C] array of unit-interval intensities."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 4:
            raise VideoError(f"video data must be [T,H,W,C], got shape {d.shape}")
        t, h, w, c = d.shape
        if t < 1 or h < 1 or w < 1:
            raise VideoError(f"empty video dimensions {d.shape}")
        if c not in (1, 3):
            raise VideoError(f"channel count must be 1 or 3, got {c}")
        if not np.issubdtype(d.dtype, np.floating):
            raise VideoError(f"video data must be float, got {d.dtype}")
        lo, hi = float(d.min()), float(d.max())
        if lo < 0.0 or hi > 1.0:
            raise VideoError(f"video values outside [0,1]: min={lo}, max={hi}")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def frame(self, t: int) -> np.ndarray:
        return self.data[t]


def _frame_files(directory: Path) -> list[Path]:
    files = sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in FRAME_EXTENSIONS
    )
    return files


def load_video(directory: str | Path) -> VideoTensor:
    """Load a frame directory into a VideoTensor, scaling 8-bit values to [0,1].

    Frames are read in lexicographic filename order. All frames must decode
    and share identical dimensions; violations are reported with the
    offending filename.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise VideoError(f"frame directory does not exist: {directory}")
    files = _frame_files(directory)
    if not files:
        raise VideoError(f"no frame files found in {directory}")
    frames = []
    shape = None
    for path in files:
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise VideoError(f"undecodable frame file {path.name}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise VideoError(
                f"frame dimension mismatch in {path.name}: "
                f"expected {shape}, got {arr.shape}"
            )
        frames.append(arr)
    return VideoTensor(np.stack(frames, axis=0))


def save_video(video: VideoTensor, directory: str | Path) -> list[Path]:
    """Write a video as zero-padded 8-bit PNG frames; returns written paths.

    Round trip through load_video reproduces values up to 8-bit quantization
    (max abs error <= 1/510 per channel).
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VideoError(f"cannot create frame directory {directory}: {exc}") from exc
    data = video.data
    if data.shape[3] == 1:
        data = np.repeat(data, 3, axis=3)
    paths = []
    for t in range(data.shape[0]):
        frame8 = np.round(data[t] * 255.0).astype(np.uint8)
        path = directory / f"{t:08d}.png"
        try:
            Image.fromarray(frame8, mode="RGB").save(path)
        except OSError as exc:
            raise VideoError(f"cannot write frame {path}: {exc}") from exc
        paths.append(path)
    return paths


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian, radius ceil(3*sigma), renormalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def degrade(hr: VideoTensor, sigma: float = 1.5, scale: int = 4) -> VideoTensor:
    """Blur each frame with a Gaussian and decimate by taking every
    scale-th pixel starting at offset 0.

    Borders use symmetric reflection, so constant frames stay constant. H and
    W must be divisible by scale; output shape is [T, H/scale, W/scale, C].
    """
    t, h, w, c = hr.data.shape
    if h % scale != 0 or w % scale != 0:
        raise VideoError(
            f"frame size {h}x{w} not divisible by scale {scale}"
        )
    kernel = gaussian_kernel(sigma)
    blurred = correlate1d(hr.data.astype(np.float64), kernel, axis=1, mode="reflect")
    blurred = correlate1d(blurred, kernel, axis=2, mode="reflect")
    # Normalized non-negative kernel cannot overshoot, but guard rounding.
    blurred = np.clip(blurred, 0.0, 1.0)
    return VideoTensor(blurred[:, ::scale, ::scale, :])


# ITU-R BT.601 luma coefficients on the 8-bit studio-swing convention.
_Y_COEFF = np.array([65.481, 128.553, 24.966], dtype=np.float64)
_Y_OFFSET = 16.0


def rgb_to_y(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma of an [H,W,3] frame in [0,1]; returns [H,W,1] in [0,1].

    Y_255 = 16 + 65.481*R + 128.553*G + 24.966*B, rescaled by 1/255.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise VideoError(f"expected [H,W,3] RGB frame, got shape {frame.shape}")
    y255 = _Y_OFFSET + frame.astype(np.float64) @ _Y_COEFF
    return (y255 / 255.0)[..., np.newaxis]
