"""Synthetic probe videos with exactly controlled properties.

Generators for stress-testing recurrent super-resolution: temporally copied
static videos, sliding-window camera motion with a chosen per-frame slide,
gamma-modulated intensity change, and palindrome extension of short videos
to arbitrary lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .videocore import VideoError, VideoTensor

SLIDE_PATHS = ("horizontal-pingpong", "diagonal-pingpong")


@dataclass(frozen=True)
class SlideSpec:
    """Sliding-window motion: window size, per-frame slide in pixels, path."""

    window_w: int
    window_h: int
    slide: int = 1
    path: str = "horizontal-pingpong"

    def __post_init__(self):
        if self.window_w < 1 or self.window_h < 1:
            raise ValueError(f"window must be positive, got {self.window_w}x{self.window_h}")
        if self.slide < 0:
            raise ValueError(f"slide must be >= 0, got {self.slide}")
        if self.path not in SLIDE_PATHS:
            raise ValueError(f"unknown slide path {self.path!r}; choose from {SLIDE_PATHS}")


@dataclass(frozen=True)
class GammaSpec:
    """Triangular gamma schedule between gamma_min and gamma_max."""

    gamma_min: float
    gamma_max: float
    period: int

    def __post_init__(self):
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ValueError(
                f"need 0 < gamma_min <= gamma_max, got {self.gamma_min}, {self.gamma_max}"
            )
        if self.period < 1:
            raise ValueError(f"period must be positive, got {self.period}")


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise VideoError(f"expected [H,W,C] frame with C in {{1,3}}, got {frame.shape}")
    return frame


def make_static(frame: np.ndarray, length: int) -> VideoTensor:
    """Copy one frame into a video of `length` identical frames."""
    frame = _check_frame(frame)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    return VideoTensor(np.broadcast_to(frame, (length,) + frame.shape).copy())


def pingpong_offset(t: int, slide: int, max_offset: int) -> int:
    """Window offset after t frames of sliding, bouncing at 0 and max_offset.

    Triangle wave of u = t*slide over period 2*max_offset; equals the
    step-by-step simulation that advances by `slide` and reflects overshoot
    at the borders.
    """
    if max_offset == 0 or slide == 0:
        return 0
    u = (t * slide) % (2 * max_offset)
    return max_offset - abs(max_offset - u)


def make_sliding(frame: np.ndarray, spec: SlideSpec, length: int) -> VideoTensor:
    """Slide a window across one frame to fake camera motion.

    The window starts at the top-left corner, advances `slide` pixels per
    frame along the chosen path and ping-pongs at the frame borders, so any
    length is valid. Every output frame is an exact sub-rectangle of the
    source frame.
    """
    frame = _check_frame(frame)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    h, w, _ = frame.shape
    if spec.window_w > w or spec.window_h > h:
        raise VideoError(
            f"window {spec.window_w}x{spec.window_h} larger than frame {w}x{h}"
        )
    max_x = w - spec.window_w
    max_y = h - spec.window_h
    frames = np.empty((length, spec.window_h, spec.window_w, frame.shape[2]))
    for t in range(length):
        x = pingpong_offset(t, spec.slide, max_x)
        y = pingpong_offset(t, spec.slide, max_y) if spec.path == "diagonal-pingpong" else 0
        frames[t] = frame[y:y + spec.window_h, x:x + spec.window_w]
    return VideoTensor(frames)


def gamma_at(t: int, spec: GammaSpec) -> float:
    """Gamma value at frame t: triangular wave, gamma_min at t=0,
    gamma_max at t=period/2."""
    phase = (t % spec.period) / spec.period
    return spec.gamma_min + (spec.gamma_max - spec.gamma_min) * (1.0 - abs(1.0 - 2.0 * phase))


def make_gamma(frame: np.ndarray, spec: GammaSpec, length: int) -> VideoTensor:
    """Darken and brighten one frame with a triangular gamma schedule."""
    frame = _check_frame(frame)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    frames = np.stack([frame ** gamma_at(t, spec) for t in range(length)], axis=0)
    return VideoTensor(frames)


def palindrome_index(i: int, n: int) -> int:
    """1-based source index for 1-based output position i of the
    f1..fN,fN-1..f1,f2.. oscillation."""
    cycle = 2 * n - 2
    j = (i - 1) % cycle
    return j + 1 if j < n else 2 * n - 1 - j


def make_palindrome(video: VideoTensor, target_len: int) -> VideoTensor:
    """Extend a video by alternating it with its temporal reverse.

    Output frame sequence is f1, f2, ..., fN, fN-1, ..., f2, f1, f2, ...
    truncated to target_len frames.
    """
    n = video.frame_count
    if n < 2:
        raise VideoError(f"palindrome extension needs >= 2 frames, got {n}")
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    idx = [palindrome_index(i, n) - 1 for i in range(1, target_len + 1)]
    return VideoTensor(video.data[idx].copy())
