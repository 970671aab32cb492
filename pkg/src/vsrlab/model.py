"""Compact flow-warp recurrent super-resolution network with explicit state.

The recurrent carrier is the previous super-resolved frame: each step
estimates dense optical flow between the previous and current low-resolution
frames, upscales the flow, backward-warps the previous SR estimate, and feeds
the warped estimate (space-to-depth packed) together with the current LR
frame into a residual reconstruction net. An optional one-channel image
encoding the normalized frame number can be concatenated to the
reconstruction input.

Public tensors are channels-last: frames are [H, W, C] (or batched
[B, H, W, C]), flows are [H, W, 2] with (dx, dy) in pixel units.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

SENTINEL_INIT = -1

STATE_INIT_KINDS = ("zeros", "uniform_noise")


class DivergenceError(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values."""


@dataclass(frozen=True)
class ConditionSpec:
    """Frame-number conditioning: constant channel min(t / t_max_norm, 1)."""

    enabled: bool = False
    t_max_norm: int = 300

    def __post_init__(self):
        if self.t_max_norm < 1:
            raise ValueError(f"t_max_norm must be >= 1, got {self.t_max_norm}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyper-parameters; the paper-scale network is a config choice."""

    scale: int = 4
    image_channels: int = 3
    flow_widths: tuple[int, ...] = (16, 16, 16)
    flow_max: float = 10.0
    sr_width: int = 16
    sr_blocks: int = 3
    global_residual: bool = False
    condition: ConditionSpec = ConditionSpec()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["flow_widths"] = tuple(d["flow_widths"])
        d["condition"] = ConditionSpec(**d["condition"])
        return cls(**d)


@dataclass
class RecurrentState:
    """State carried between frames.

    prev_sr is the previous SR estimate [B, H*scale, W*scale, C]; prev_lr is
    the previous LR frame needed by the flow estimator (None before the first
    frame, in which case the current frame is used: zero-motion bootstrap).
    tag is the frame index the state corresponds to, SENTINEL_INIT before the
    video starts.
    """

    prev_sr: torch.Tensor
    prev_lr: torch.Tensor | None = None
    tag: int = SENTINEL_INIT

    def detached(self) -> "RecurrentState":
        return RecurrentState(
            prev_sr=self.prev_sr.detach().clone(),
            prev_lr=None if self.prev_lr is None else self.prev_lr.detach().clone(),
            tag=self.tag,
        )


def _with_batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim:
        return x.unsqueeze(0), True
    if x.dim() == ndim + 1:
        return x, False
    raise ValueError(f"expected {ndim}- or {ndim + 1}-dimensional tensor, got {x.dim()}")


_GRID_CACHE: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}


def _pixel_grid(h: int, w: int, dtype: torch.dtype, device: torch.device):
    key = (h, w, dtype, device)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = torch.meshgrid(
            torch.arange(h, dtype=dtype, device=device),
            torch.arange(w, dtype=dtype, device=device),
            indexing="ij",
        )
        _GRID_CACHE[key] = grid
    return grid


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp an image by a dense flow with bilinear sampling.

    image is [H,W,C] (or [B,H,W,C]), flow is [H,W,2] (or [B,H,W,2]) in pixel
    units: output[y, x] samples image at (x + flow[y,x,0], y + flow[y,x,1]).
    Out-of-frame samples clamp to the border. Zero flow is the exact
    identity. Differentiable in both image and flow.
    """
    image, squeeze = _with_batch(image, 3)
    flow, _ = _with_batch(flow, 3)
    if image.shape[:3] != flow.shape[:3] or flow.shape[3] != 2:
        raise ValueError(f"shape mismatch: image {image.shape}, flow {flow.shape}")
    b, h, w, _ = image.shape
    ys, xs = _pixel_grid(h, w, image.dtype, image.device)
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    # cell indices are piecewise constant (zero gradient a.e.), so keep the
    # integer bookkeeping out of the autograd graph
    with torch.no_grad():
        x0f = sx.floor()
        y0f = sy.floor()
        x0 = x0f.long()
        y0 = y0f.long()
        x0c = x0.clamp(0, w - 1)
        x1c = (x0 + 1).clamp(0, w - 1)
        y0c = y0.clamp(0, h - 1)
        y1c = (y0 + 1).clamp(0, h - 1)
        bi = torch.arange(b, device=image.device).view(b, 1, 1).expand(b, h, w)
    wx = (sx - x0f).unsqueeze(-1)
    wy = (sy - y0f).unsqueeze(-1)
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = (w00 * image[bi, y0c, x0c] + w01 * image[bi, y0c, x1c]
           + w10 * image[bi, y1c, x0c] + w11 * image[bi, y1c, x1c])
    return out.squeeze(0) if squeeze else out


def upscale_flow(flow: torch.Tensor, scale: int) -> torch.Tensor:
    """Bilinearly upsample a flow field and convert its values from LR to HR
    pixel units (multiply by scale)."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    flow, squeeze = _with_batch(flow, 3)
    if scale == 1:
        out = flow
    else:
        nchw = flow.permute(0, 3, 1, 2)
        up = F.interpolate(nchw, scale_factor=scale, mode="bilinear", align_corners=False)
        out = (up * scale).permute(0, 2, 3, 1)
    return out.squeeze(0) if squeeze else out


def space_to_depth(image: torch.Tensor, factor: int) -> torch.Tensor:
    """Rearrange [H,W,C] into [H/factor, W/factor, C*factor^2]; exact inverse
    of depth_to_space."""
    image, squeeze = _with_batch(image, 3)
    b, h, w, c = image.shape
    if h % factor != 0 or w % factor != 0:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {factor}")
    x = image.reshape(b, h // factor, factor, w // factor, factor, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // factor, w // factor, factor * factor * c)
    return x.squeeze(0) if squeeze else x


def depth_to_space(image: torch.Tensor, factor: int) -> torch.Tensor:
    """Inverse of space_to_depth."""
    image, squeeze = _with_batch(image, 3)
    b, h, w, c = image.shape
    if c % (factor * factor) != 0:
        raise ValueError(f"channel count {c} not divisible by factor^2 = {factor * factor}")
    cc = c // (factor * factor)
    x = image.reshape(b, h, w, factor, factor, cc)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * factor, w * factor, cc)
    return x.squeeze(0) if squeeze else x


def frame_number_channel(t: int, spec: ConditionSpec, h: int, w: int,
                         dtype: torch.dtype = torch.float32,
                         device: torch.device | str = "cpu") -> torch.Tensor:
    """Constant [h,w,1] image with value min(t / t_max_norm, 1)."""
    if t < 0:
        raise ValueError(f"frame number must be >= 0, got {t}")
    value = min(t / spec.t_max_norm, 1.0)
    return torch.full((h, w, 1), value, dtype=dtype, device=device)


def init_state(kind: str, shape: tuple[int, ...],
               generator: torch.Generator | None = None,
               dtype: torch.dtype = torch.float32,
               device: torch.device | str = "cpu") -> RecurrentState:
    """Pre-video recurrent state: all zeros or i.i.d. uniform [0,1) noise.

    shape is the SR-frame shape ([B, H, W, C] or [H, W, C]); tag is
    SENTINEL_INIT and prev_lr is left unset (first step bootstraps it).
    """
    if kind not in STATE_INIT_KINDS:
        raise ValueError(f"unknown init kind {kind!r}; choose from {STATE_INIT_KINDS}")
    if kind == "zeros":
        prev_sr = torch.zeros(shape, dtype=dtype, device=device)
    else:
        prev_sr = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    return RecurrentState(prev_sr=prev_sr, prev_lr=None, tag=SENTINEL_INIT)


class FlowWarpVSR(nn.Module):
    """Flow-estimation + warp + residual reconstruction recurrent SR network."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c = spec.image_channels
        widths = (2 * c,) + tuple(spec.flow_widths)
        flow_layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            flow_layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.1)]
        flow_layers.append(nn.Conv2d(widths[-1], 2, 3, padding=1))
        self.flow_net = nn.Sequential(*flow_layers)

        sr_in = c + (1 if spec.condition.enabled else 0) + c * spec.scale ** 2
        self.sr_in = nn.Conv2d(sr_in, spec.sr_width, 3, padding=1)
        self.sr_blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(spec.sr_width, spec.sr_width, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(spec.sr_width, spec.sr_width, 3, padding=1),
            )
            for _ in range(spec.sr_blocks)
        )
        self.sr_up = nn.Conv2d(spec.sr_width, c * spec.scale ** 2, 3, padding=1)

    @property
    def scale(self) -> int:
        return self.spec.scale

    def flow_estimate(self, prev_lr: torch.Tensor, cur_lr: torch.Tensor) -> torch.Tensor:
        """Dense flow between two LR frames, saturated to |flow| <= flow_max."""
        prev_lr, squeeze = _with_batch(prev_lr, 3)
        cur_lr, _ = _with_batch(cur_lr, 3)
        if prev_lr.shape != cur_lr.shape:
            raise ValueError(f"shape mismatch: {prev_lr.shape} vs {cur_lr.shape}")
        x = torch.cat([prev_lr, cur_lr], dim=-1).permute(0, 3, 1, 2)
        flow = torch.tanh(self.flow_net(x)) * self.spec.flow_max
        flow = flow.permute(0, 2, 3, 1)
        return flow.squeeze(0) if squeeze else flow

    def initial_state(self, batch: int, h: int, w: int, kind: str = "zeros",
                      generator: torch.Generator | None = None) -> RecurrentState:
        p = next(self.parameters())
        shape = (batch, h * self.scale, w * self.scale, self.spec.image_channels)
        return init_state(kind, shape, generator=generator, dtype=p.dtype, device=p.device)

    def step(self, lr_frame: torch.Tensor, state: RecurrentState,
             cond: torch.Tensor | None = None, return_flow: bool = False):
        """Advance the recurrence by one frame.

        Returns (sr_frame, next_state), plus the LR-unit flow when
        return_flow is set. Raises DivergenceError on non-finite outputs.
        """
        lr_frame, squeeze = _with_batch(lr_frame, 3)
        b, h, w, c = lr_frame.shape
        scale = self.scale
        prev_sr, _ = _with_batch(state.prev_sr, 3)
        if prev_sr.shape != (b, h * scale, w * scale, c):
            raise ValueError(
                f"state shape {tuple(prev_sr.shape)} inconsistent with LR input "
                f"{tuple(lr_frame.shape)} at scale {scale}"
            )
        if self.spec.condition.enabled and cond is None:
            raise ValueError("conditioning enabled but no condition channel given")
        if not self.spec.condition.enabled and cond is not None:
            raise ValueError("condition channel given but conditioning is disabled")

        if state.prev_lr is None:
            prev_lr = lr_frame
        else:
            prev_lr, _ = _with_batch(state.prev_lr, 3)
        flow = self.flow_estimate(prev_lr, lr_frame)
        warped = warp(prev_sr, upscale_flow(flow, scale))

        parts = [lr_frame]
        if cond is not None:
            cond, _ = _with_batch(cond, 3)
            if cond.shape[1:] != (h, w, 1):
                raise ValueError(f"condition channel must be [{h},{w},1], got {tuple(cond.shape)}")
            parts.append(cond.expand(b, h, w, 1))
        parts.append(space_to_depth(warped, scale))
        x = torch.cat(parts, dim=-1).permute(0, 3, 1, 2)

        feat = F.leaky_relu(self.sr_in(x), 0.1)
        for block in self.sr_blocks:
            feat = feat + block(feat)
        sr = F.pixel_shuffle(self.sr_up(feat), scale)
        lr_nchw = lr_frame.permute(0, 3, 1, 2)
        if self.spec.global_residual:
            sr = sr + F.interpolate(lr_nchw, scale_factor=scale, mode="bilinear",
                                    align_corners=False)
        sr = sr.permute(0, 2, 3, 1)
        if not torch.isfinite(sr).all():
            raise DivergenceError(f"non-finite SR output at state tag {state.tag}")

        next_state = RecurrentState(prev_sr=sr, prev_lr=lr_frame, tag=state.tag + 1)
        if squeeze:
            sr = sr.squeeze(0)
        if return_flow:
            return sr, next_state, (flow.squeeze(0) if squeeze else flow)
        return sr, next_state


def build_model(spec: ModelSpec, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> FlowWarpVSR:
    """Construct a FlowWarpVSR with weights drawn deterministically from seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = FlowWarpVSR(spec)
    return model.to(dtype)


_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}
_NAME_DTYPES = {v: k for k, v in _DTYPE_NAMES.items()}


def save_checkpoint(model: FlowWarpVSR, directory: str | Path, *,
                    iteration: int = 0, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Write weights.pt plus a plain-text manifest; loads back bit-exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    dtype = next(model.parameters()).dtype
    manifest = {
        "model": model.spec.to_dict(),
        "dtype": _DTYPE_NAMES[dtype],
        "iteration": iteration,
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[FlowWarpVSR, dict]:
    """Load a checkpoint directory written by save_checkpoint."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec.from_dict(manifest["model"])
    model = FlowWarpVSR(spec).to(_NAME_DTYPES[manifest["dtype"]])
    state = torch.load(directory / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    return model, manifest
