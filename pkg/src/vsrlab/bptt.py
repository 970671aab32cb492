"""Truncated BPTT training strategies for the recurrent SR network.

Two strategies share one code path and differ only in where a clip's initial
recurrent state comes from:

* RI: every clip starts from a randomly initialized state (the usual
  random-clip/random-crop scheme).
* PI: once per epoch, each training video is cropped at a fixed window and a
  no-gradient forward pass over all its frames snapshots every recurrent
  state into a HiddenStateStore; truncated clips then start from the stored
  state of the frame preceding the clip. Each stored build is reused for R
  clip draws per video, trading staleness for amortized feed-forward cost.

Stored states are always gradient-detached; no backpropagation crosses the
store.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import (
    SENTINEL_INIT,
    ConditionSpec,
    DivergenceError,
    FlowWarpVSR,
    ModelSpec,
    RecurrentState,
    build_model,
    frame_number_channel,
    init_state,
    save_checkpoint,
    warp,
)

LOSS_LOG_FIELDS = ("iteration", "epoch", "strategy", "loss", "content_loss", "warp_loss", "lr")
STRATEGIES = ("ri", "pi")


class MissingStateError(KeyError):
    """Raised when a clip requests a hidden state absent from the store."""


@dataclass(frozen=True)
class ClipRect:
    """Crop rectangle in LR pixel coordinates."""

    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class ClipSpec:
    """One truncated-BPTT work item: video, temporal start, length, crop."""

    video_id: str
    start: int
    length: int
    crop: ClipRect

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"clip start must be >= 0, got {self.start}")
        if self.length < 1:
            raise ValueError(f"clip length must be >= 1, got {self.length}")


@dataclass
class TrainingVideo:
    """An in-memory LR/HR pair; LR is the degraded HR at the model scale."""

    video_id: str
    lr: torch.Tensor  # [T, h, w, C]
    hr: torch.Tensor  # [T, h*scale, w*scale, C]

    @property
    def frame_count(self) -> int:
        return self.lr.shape[0]


@dataclass(frozen=True)
class EpochPlan:
    """Per-epoch accounting: N videos, R repeats, N*R clip draws."""

    n_videos: int
    repeats: int
    clip_len: int
    crop_size: int
    batch_size: int

    def __post_init__(self):
        if (self.n_videos * self.repeats) % self.batch_size != 0:
            raise ValueError(
                f"N*R = {self.n_videos * self.repeats} not divisible by "
                f"batch size {self.batch_size}"
            )

    @property
    def draws_per_epoch(self) -> int:
        return self.n_videos * self.repeats

    @property
    def iterations_per_epoch(self) -> int:
        return self.draws_per_epoch // self.batch_size


@dataclass
class EpochTiming:
    epoch: int
    t_ff_ms: float
    n_it: int
    mean_step_ms: float

    @property
    def amortized_ms(self) -> float:
        return self.t_ff_ms / self.n_it if self.n_it else 0.0

    @property
    def reported_ms(self) -> float:
        """Per-iteration cost: measured step time plus amortized store build."""
        return self.mean_step_ms + self.amortized_ms


@dataclass
class TimeLedger:
    """Plain-text per-epoch record of feed-forward and step timings."""

    rows: list[EpochTiming] = field(default_factory=list)

    def add(self, row: EpochTiming) -> None:
        self.rows.append(row)

    def mean_reported_ms(self) -> float:
        return float(np.mean([r.reported_ms for r in self.rows])) if self.rows else 0.0

    def mean_t_ff_ms(self) -> float:
        return float(np.mean([r.t_ff_ms for r in self.rows])) if self.rows else 0.0

    def write(self, path: str | Path) -> None:
        lines = ["epoch\tt_ff_ms\tn_it\tamortized_ms\tmean_step_ms\treported_ms"]
        for r in self.rows:
            lines.append(
                f"{r.epoch}\t{r.t_ff_ms:.3f}\t{r.n_it}\t{r.amortized_ms:.3f}"
                f"\t{r.mean_step_ms:.3f}\t{r.reported_ms:.3f}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TimeLedger":
        ledger = cls()
        lines = Path(path).read_text().splitlines()
        for line in lines[1:]:
            epoch, t_ff, n_it, _amort, mean_step, _rep = line.split("\t")
            ledger.add(EpochTiming(int(epoch), float(t_ff), int(n_it), float(mean_step)))
        return ledger


class HiddenStateStore:
    """Per-epoch cache of recurrent state snapshots keyed by
    (video_id, frame index), with index -1 holding the initial random state.

    Snapshots are gradient-detached and unbatched.
    """

    def __init__(self, epoch: int, crops: dict[str, ClipRect]):
        self.epoch = epoch
        self.crops = dict(crops)
        self._states: dict[tuple[str, int], RecurrentState] = {}

    def put(self, video_id: str, index: int, state: RecurrentState) -> None:
        snap = state.detached()
        if snap.prev_sr.dim() == 4:
            snap = RecurrentState(
                prev_sr=snap.prev_sr.squeeze(0),
                prev_lr=None if snap.prev_lr is None else snap.prev_lr.squeeze(0),
                tag=snap.tag,
            )
        self._states[(video_id, index)] = snap

    def get(self, video_id: str, index: int) -> RecurrentState:
        try:
            return self._states[(video_id, index)]
        except KeyError:
            raise MissingStateError(
                f"no stored state for video {video_id!r} at frame index {index}"
            ) from None

    def has(self, video_id: str, index: int) -> bool:
        return (video_id, index) in self._states

    def indices(self, video_id: str) -> list[int]:
        return sorted(i for (v, i) in self._states if v == video_id)

    def video_ids(self) -> list[str]:
        return sorted({v for (v, _) in self._states})


def crop_epoch(videos: list[TrainingVideo], crop_size: int,
               rng: np.random.Generator) -> dict[str, ClipRect]:
    """Draw one uniform-random crop rectangle per video, fixed across all its
    frames; rectangles may differ between videos."""
    crops = {}
    for video in sorted(videos, key=lambda v: v.video_id):
        _, h, w, _ = video.lr.shape
        if crop_size > h or crop_size > w:
            raise ValueError(
                f"crop {crop_size} larger than {w}x{h} frames of video "
                f"{video.video_id!r}"
            )
        x = int(rng.integers(0, w - crop_size + 1))
        y = int(rng.integers(0, h - crop_size + 1))
        crops[video.video_id] = ClipRect(x, y, crop_size, crop_size)
    return crops


def crop_lr(video: TrainingVideo, rect: ClipRect) -> torch.Tensor:
    return video.lr[:, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w, :]


def crop_hr(video: TrainingVideo, rect: ClipRect, scale: int) -> torch.Tensor:
    return video.hr[:, rect.y * scale:(rect.y + rect.h) * scale,
                    rect.x * scale:(rect.x + rect.w) * scale, :]


def sample_clip(total_frames: int, clip_len: int, rng: np.random.Generator) -> int:
    """Uniform temporal start over {0, ..., total_frames - clip_len}."""
    if total_frames < clip_len:
        raise ValueError(f"video with {total_frames} frames shorter than clip {clip_len}")
    return int(rng.integers(0, total_frames - clip_len + 1))


def build_store(model: FlowWarpVSR, videos: list[TrainingVideo],
                crops: dict[str, ClipRect], init_kind: str,
                generator: torch.Generator | None = None) -> HiddenStateStore:
    """One-time no-gradient forward pass over every frame of every cropped
    video, snapshotting all recurrent states (index -1 holds the initial
    state)."""
    store = HiddenStateStore(epoch=0, crops=crops)
    cond_spec = model.spec.condition
    with torch.no_grad():
        for video in sorted(videos, key=lambda v: v.video_id):
            rect = crops[video.video_id]
            lr = crop_lr(video, rect)
            state = model.initial_state(1, rect.h, rect.w, init_kind, generator)
            store.put(video.video_id, -1, state)
            for t in range(video.frame_count):
                cond = None
                if cond_spec.enabled:
                    cond = frame_number_channel(
                        t, cond_spec, rect.h, rect.w,
                        dtype=lr.dtype, device=lr.device,
                    )
                _, state = model.step(lr[t].unsqueeze(0), state, cond)
                store.put(video.video_id, t, state)
    return store


@dataclass
class StepResult:
    loss: float
    content_loss: float
    warp_loss: float


def clip_loss(sr_frames, hr_frames, flows, lr_frames, lambda_w: float = 1.0):
    """Clip training loss: MSE(SR, HR) plus lambda_w * MSE(warp(prev LR,
    flow), current LR).

    sr_frames, hr_frames and flows hold l entries; lr_frames holds l+1: the
    flow-reference frame (the frame preceding the clip, or a copy of the
    first frame at the video start) followed by the l clip frames. Returns
    (total, content, warp) as 0-d tensors.
    """
    if not (len(sr_frames) == len(hr_frames) == len(flows) == len(lr_frames) - 1):
        raise ValueError(
            f"frame count mismatch: {len(sr_frames)} SR, {len(hr_frames)} HR, "
            f"{len(flows)} flows, {len(lr_frames)} LR (need l, l, l, l+1)"
        )
    sr = torch.stack(list(sr_frames))
    hr = torch.stack(list(hr_frames))
    if sr.shape != hr.shape:
        raise ValueError(f"SR/HR shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    diff = sr - hr
    content = (diff * diff).mean()
    # one batched warp over all clip frames
    warped = warp(torch.cat(list(lr_frames[:-1])), torch.cat(list(flows)))
    err = warped - torch.cat(list(lr_frames[1:]))
    warp_term = (err * err).mean()
    return content + lambda_w * warp_term, content, warp_term


def _batch_condition(starts: list[int], offset: int, spec: ConditionSpec,
                     h: int, w: int, dtype, device) -> torch.Tensor:
    values = [min((s + offset) / spec.t_max_norm, 1.0) for s in starts]
    col = torch.tensor(values, dtype=dtype, device=device).view(-1, 1, 1, 1)
    return col.expand(len(starts), h, w, 1)


def _stack_states(states: list[RecurrentState], first_lr: list[torch.Tensor]) -> RecurrentState:
    """Stack per-clip states into one batched state; a missing prev_lr is
    bootstrapped with that clip's first LR frame (zero-motion assumption, the
    same rule step() applies)."""
    prev_sr = torch.stack([s.prev_sr for s in states])
    prev_lr = torch.stack([
        s.prev_lr if s.prev_lr is not None else first_lr[i]
        for i, s in enumerate(states)
    ])
    return RecurrentState(prev_sr=prev_sr, prev_lr=prev_lr, tag=SENTINEL_INIT)


def _run_batch(model: FlowWarpVSR, optimizer: torch.optim.Optimizer,
               videos_by_id: dict[str, TrainingVideo], clips: list[ClipSpec],
               state0: RecurrentState, ref_lr: torch.Tensor,
               lambda_w: float) -> StepResult:
    """Unroll a batch of equally-long clips from a common batched initial
    state and apply one optimizer update on the batch-mean loss."""
    length = clips[0].length
    scale = model.scale
    cond_spec = model.spec.condition
    lr_clips = torch.stack([
        crop_lr(videos_by_id[c.video_id], c.crop)[c.start:c.start + length]
        for c in clips
    ], dim=1)  # [l, B, h, w, C]
    hr_clips = torch.stack([
        crop_hr(videos_by_id[c.video_id], c.crop, scale)[c.start:c.start + length]
        for c in clips
    ], dim=1)
    lr_seq = [lr_clips[k] for k in range(length)]
    hr_seq = [hr_clips[k] for k in range(length)]

    starts = [c.start for c in clips]
    h, w = lr_seq[0].shape[1], lr_seq[0].shape[2]
    state = state0
    srs, flows = [], []
    for k in range(length):
        cond = None
        if cond_spec.enabled:
            cond = _batch_condition(starts, k, cond_spec, h, w,
                                    lr_seq[k].dtype, lr_seq[k].device)
        sr, state, flow = model.step(lr_seq[k], state, cond, return_flow=True)
        srs.append(sr)
        flows.append(flow)

    total, content, warp_term = clip_loss(srs, hr_seq, flows, [ref_lr] + lr_seq, lambda_w)
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite loss {float(total)}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise DivergenceError("non-finite parameters after optimizer update")
    return StepResult(total.item(), content.item(), warp_term.item())


def ri_step(model: FlowWarpVSR, optimizer: torch.optim.Optimizer,
            videos_by_id: dict[str, TrainingVideo], clips: list[ClipSpec],
            generator: torch.Generator | None = None,
            init_kind: str = "uniform_noise", lambda_w: float = 1.0) -> StepResult:
    """One RI update: every clip starts from a freshly initialized state."""
    rect = clips[0].crop
    first_lr = torch.stack(
        [crop_lr(videos_by_id[c.video_id], c.crop)[c.start] for c in clips]
    )
    init = model.initial_state(len(clips), rect.h, rect.w, init_kind, generator)
    state0 = RecurrentState(prev_sr=init.prev_sr, prev_lr=first_lr, tag=SENTINEL_INIT)
    return _run_batch(model, optimizer, videos_by_id, clips, state0, first_lr, lambda_w)


def pi_step(model: FlowWarpVSR, optimizer: torch.optim.Optimizer,
            videos_by_id: dict[str, TrainingVideo], clips: list[ClipSpec],
            store: HiddenStateStore, lambda_w: float = 1.0) -> StepResult:
    """One PI update: every clip starts from the stored (detached) state of
    the frame preceding it; index -1 covers clips starting at frame 0."""
    states, first_lr = [], []
    for clip in clips:
        if store.crops.get(clip.video_id) != clip.crop:
            raise ValueError(
                f"clip crop {clip.crop} differs from the epoch crop "
                f"{store.crops.get(clip.video_id)} for video {clip.video_id!r}"
            )
        states.append(store.get(clip.video_id, clip.start - 1))
        first_lr.append(crop_lr(videos_by_id[clip.video_id], clip.crop)[clip.start])
    state0 = _stack_states(states, first_lr)
    ref_lr = state0.prev_lr
    return _run_batch(model, optimizer, videos_by_id, clips, state0, ref_lr, lambda_w)


class _VideoCycler:
    """Round-robin over a reshuffled video list; over N*R draws each video
    appears exactly R times."""

    def __init__(self, video_ids: list[str], rng: np.random.Generator):
        self._ids = sorted(video_ids)
        self._rng = rng
        self._queue: list[str] = []

    def draw(self, count: int) -> list[str]:
        out = []
        while len(out) < count:
            if not self._queue:
                self._queue = [self._ids[i] for i in self._rng.permutation(len(self._ids))]
            out.append(self._queue.pop())
        return out


@dataclass
class TrainSettings:
    """Knobs of one training run; defaults mirror the full-scale recipe."""

    strategy: str = "ri"
    iterations: int = 500_000
    clip_len: int = 15
    crop_size: int = 64
    batch_size: int = 4
    repeats: int = 2
    lr: float = 1e-4
    lr_schedule: str = "piecewise"
    lr_milestones: tuple[int, ...] = (150_000, 300_000)
    lr_gamma: float = 0.5
    lambda_w: float = 1.0
    init_kind: str = "uniform_noise"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.lr_schedule not in ("piecewise", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def schedule_lr(settings: TrainSettings, iteration: int) -> float:
    if settings.lr_schedule == "piecewise":
        drops = sum(iteration >= m for m in settings.lr_milestones)
        return settings.lr * settings.lr_gamma ** drops
    progress = iteration / max(settings.iterations - 1, 1)
    return settings.lr * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


@dataclass
class TrainResult:
    out_dir: Path
    iterations_done: int
    diverged: bool
    ledger: TimeLedger
    checkpoints: list[Path]
    final_loss: float | None

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints[-1]


def run_training(model_spec: ModelSpec, videos: list[TrainingVideo],
                 settings: TrainSettings, out_dir: str | Path,
                 dtype: torch.dtype = torch.float32) -> TrainResult:
    """Run one training job; writes loss_log.csv, timing.csv, ledger.txt and
    checkpoints under out_dir. Fully reproducible given the seed in
    single-worker mode (wall-clock times live outside the loss log)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = EpochPlan(
        n_videos=len(videos),
        repeats=settings.repeats,
        clip_len=settings.clip_len,
        crop_size=settings.crop_size,
        batch_size=settings.batch_size,
    )
    for video in videos:
        if video.frame_count < settings.clip_len:
            raise ValueError(
                f"video {video.video_id!r} has {video.frame_count} frames, "
                f"shorter than clip length {settings.clip_len}"
            )

    model = build_model(model_spec, seed=settings.seed, dtype=dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    noise_gen = torch.Generator().manual_seed(settings.seed + 1)
    videos_by_id = {v.video_id: v for v in videos}
    cycler = _VideoCycler(list(videos_by_id), rng)

    ledger = TimeLedger()
    checkpoints = []

    def save(tag_iter: int) -> None:
        path = save_checkpoint(
            model, out_dir / "checkpoints" / f"iter_{tag_iter:08d}",
            iteration=tag_iter, seed=settings.seed,
            extra={"strategy": settings.strategy},
        )
        checkpoints.append(path)

    save(0)
    iteration = 0
    epoch = 0
    diverged = False
    final_loss = None
    log_path = out_dir / "loss_log.csv"
    timing_path = out_dir / "timing.csv"
    with open(log_path, "w", newline="") as log_file, \
         open(timing_path, "w", newline="") as timing_file:
        log = csv.writer(log_file)
        log.writerow(LOSS_LOG_FIELDS)
        timing = csv.writer(timing_file)
        timing.writerow(("iteration", "wall_ms"))
        try:
            while iteration < settings.iterations:
                crops = crop_epoch(videos, settings.crop_size, rng)
                t_ff_ms = 0.0
                store = None
                if settings.strategy == "pi":
                    t0 = time.perf_counter()
                    store = build_store(model, videos, crops, settings.init_kind, noise_gen)
                    t_ff_ms = (time.perf_counter() - t0) * 1e3
                n_it = min(plan.iterations_per_epoch, settings.iterations - iteration)
                step_ms = []
                for _ in range(n_it):
                    ids = cycler.draw(settings.batch_size)
                    lr_now = schedule_lr(settings, iteration)
                    for group in optimizer.param_groups:
                        group["lr"] = lr_now
                    t0 = time.perf_counter()
                    clips = []
                    for vid in ids:
                        video = videos_by_id[vid]
                        start = sample_clip(video.frame_count, settings.clip_len, rng)
                        if settings.strategy == "ri":
                            rect_crops = crop_epoch([video], settings.crop_size, rng)
                            rect = rect_crops[vid]
                        else:
                            rect = crops[vid]
                        clips.append(ClipSpec(vid, start, settings.clip_len, rect))
                    if settings.strategy == "ri":
                        result = ri_step(model, optimizer, videos_by_id, clips,
                                         noise_gen, settings.init_kind, settings.lambda_w)
                    else:
                        result = pi_step(model, optimizer, videos_by_id, clips,
                                         store, settings.lambda_w)
                    dt_ms = (time.perf_counter() - t0) * 1e3
                    step_ms.append(dt_ms)
                    log.writerow((iteration, epoch, settings.strategy,
                                  repr(result.loss), repr(result.content_loss),
                                  repr(result.warp_loss), repr(lr_now)))
                    timing.writerow((iteration, f"{dt_ms:.3f}"))
                    final_loss = result.loss
                    iteration += 1
                    if settings.checkpoint_every and iteration % settings.checkpoint_every == 0:
                        save(iteration)
                ledger.add(EpochTiming(epoch, t_ff_ms, n_it, float(np.mean(step_ms))))
                epoch += 1
        except DivergenceError:
            diverged = True

    if not diverged and (not checkpoints or checkpoints[-1].name != f"iter_{iteration:08d}"):
        save(iteration)
    ledger.write(out_dir / "ledger.txt")
    return TrainResult(out_dir=out_dir, iterations_done=iteration, diverged=diverged,
                       ledger=ledger, checkpoints=checkpoints, final_loss=final_loss)
