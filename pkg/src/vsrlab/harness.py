"""Experiment orchestration: CLI, dataset handling, trade-off sweep, plots.

Subcommands: synth, degrade, train, eval, tradeoff, plot. Every run
directory is self-describing: resolved config snapshot, seed and content
hash. The VSRLAB_OUT environment variable, when set, roots all relative
output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml
from scipy.ndimage import zoom

from . import bptt, metrics, synthgen, videocore
from .config import ConfigError, ExperimentConfig, load_preset, snapshot_config
from .model import load_checkpoint
from .videocore import VideoError, VideoTensor


class HarnessError(RuntimeError):
    """Raised for CLI-level failures (bad arguments, malformed inputs)."""


def _out_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get("VSRLAB_OUT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


# ---------------------------------------------------------------------------
# Synthetic data

def make_texture_frame(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Multi-octave value-noise texture in [0,1], 3 channels.

    The finest octaves run to per-pixel scale so the HR frames carry detail
    past the LR Nyquist: x4 SR then genuinely depends on temporal
    accumulation, as with real footage."""
    octaves = ((4, 1.0), (8, 0.7), (16, 0.5), (32, 0.4), (64, 0.35), (128, 0.3), (0, 0.25))
    channels = []
    for _ in range(3):
        acc = np.zeros((height, width))
        for cells, amplitude in octaves:
            if cells == 0:
                acc += amplitude * rng.random((height, width))
                continue
            grid = rng.random((min(cells, height), min(cells, width)))
            up = zoom(grid, (height / grid.shape[0], width / grid.shape[1]),
                      order=3, mode="reflect")
            acc += amplitude * up[:height, :width]
        acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-12)
        channels.append(acc)
    base = np.stack(channels, axis=-1)
    # Correlate channels so frames look like natural imagery, not RGB static.
    luma = base.mean(axis=-1, keepdims=True)
    return np.clip(0.55 * luma + 0.45 * base, 0.0, 1.0)


def make_desk_videos(n_videos: int = 8, frames: int = 60, hr_size: int = 192,
                     seed: int = 0) -> list[tuple[str, VideoTensor]]:
    """Procedural HR training videos: sliding textured windows, half of them
    with gamma-modulated intensity."""
    rng = np.random.default_rng(seed)
    videos = []
    for i in range(n_videos):
        src_h = hr_size + int(rng.integers(hr_size // 3, hr_size // 2))
        src_w = hr_size + int(rng.integers(hr_size // 3, hr_size // 2))
        frame = make_texture_frame(rng, src_h, src_w)
        # slides of 1-3 HR px are sub-pixel at x4 LR scale, so clips carry
        # temporal detail a single LR frame cannot
        spec = synthgen.SlideSpec(
            window_w=hr_size, window_h=hr_size,
            slide=int(rng.integers(1, 4)),
            path="diagonal-pingpong" if rng.random() < 0.5 else "horizontal-pingpong",
        )
        video = synthgen.make_sliding(frame, spec, frames)
        if i % 2 == 1:
            gamma = synthgen.GammaSpec(
                gamma_min=0.8, gamma_max=1.25, period=int(rng.integers(20, 41))
            )
            data = np.stack([
                video.data[t] ** synthgen.gamma_at(t, gamma) for t in range(frames)
            ])
            video = VideoTensor(data)
        videos.append((f"train{i:02d}", video))
    return videos


def make_probe_videos(hr_size: int = 192, static_len: int = 200, short_len: int = 30,
                      n_short: int = 2, seed: int = 9000) -> list[tuple[str, VideoTensor]]:
    """Held-out probes: one long static video and a few short dynamic ones."""
    rng = np.random.default_rng(seed)
    probes = []
    frame = make_texture_frame(rng, hr_size, hr_size)
    probes.append(("static_long", synthgen.make_static(frame, static_len)))
    for i in range(n_short):
        src = make_texture_frame(rng, hr_size + 64, hr_size + 64)
        spec = synthgen.SlideSpec(window_w=hr_size, window_h=hr_size, slide=2,
                                  path="diagonal-pingpong")
        probes.append((f"short{i}", synthgen.make_sliding(src, spec, short_len)))
    return probes


def hr_to_training_video(video_id: str, hr: VideoTensor, sigma: float, scale: int,
                         dtype: torch.dtype = torch.float32) -> bptt.TrainingVideo:
    lr = videocore.degrade(hr, sigma=sigma, scale=scale)
    return bptt.TrainingVideo(
        video_id=video_id,
        lr=torch.from_numpy(lr.data).to(dtype),
        hr=torch.from_numpy(hr.data).to(dtype),
    )


def _video_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise HarnessError(f"no video subdirectories under {root}")
    return dirs


def load_training_videos(train_dir: str | Path, sigma: float, scale: int,
                         dtype: torch.dtype = torch.float32) -> list[bptt.TrainingVideo]:
    """Load every video subdirectory of train_dir as an HR video and degrade
    it to the LR counterpart."""
    root = Path(train_dir)
    if not root.is_dir():
        raise HarnessError(f"training directory does not exist: {root}")
    return [
        hr_to_training_video(d.name, videocore.load_video(d), sigma, scale, dtype)
        for d in _video_dirs(root)
    ]


def load_eval_pairs(test_dir: str | Path, sigma: float, scale: int,
                    dtype: torch.dtype = torch.float32
                    ) -> list[tuple[str, torch.Tensor, torch.Tensor]]:
    root = Path(test_dir)
    if not root.is_dir():
        raise HarnessError(f"test-set directory does not exist: {root}")
    pairs = []
    for d in _video_dirs(root):
        hr = videocore.load_video(d)
        lr = videocore.degrade(hr, sigma=sigma, scale=scale)
        pairs.append((d.name, torch.from_numpy(lr.data).to(dtype),
                      torch.from_numpy(hr.data).to(dtype)))
    return pairs


# ---------------------------------------------------------------------------
# Trade-off sweep

@dataclass
class TradeoffRow:
    label: str
    repeats: int  # 0 for the RI base row
    is_base: bool
    status: str  # "ok" | "failed"
    reported_ms: float
    amortized_ms: float
    psnr: dict[str, float]
    ssim: dict[str, float]


@dataclass
class TradeoffReport:
    rows: list[TradeoffRow]
    set_names: list[str]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            header = ["label", "R", "base", "status", "reported_ms", "amortized_ms"]
            for name in self.set_names:
                header += [f"psnr_{name}", f"ssim_{name}"]
            out.writerow(header)
            for r in self.rows:
                row = [r.label, r.repeats, int(r.is_base), r.status,
                       f"{r.reported_ms:.3f}", f"{r.amortized_ms:.3f}"]
                for name in self.set_names:
                    row += [repr(r.psnr.get(name, float("nan"))),
                            repr(r.ssim.get(name, float("nan")))]
                out.writerow(row)

    def write_scatter(self, path: str | Path) -> None:
        """(x = per-iteration time, y = mean PSNR) scatter data."""
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(("label", "time_ms", "psnr"))
            for r in self.rows:
                if r.status != "ok":
                    continue
                values = [r.psnr[n] for n in self.set_names]
                mean_psnr = float(np.mean(values)) if values else float("nan")
                out.writerow((r.label, f"{r.reported_ms:.3f}", repr(mean_psnr)))


def run_tradeoff(cfg: ExperimentConfig, repeat_values: list[int], out_dir: Path,
                 videos: list[bptt.TrainingVideo] | None = None,
                 eval_sets: dict[str, list[tuple[str, torch.Tensor, torch.Tensor]]] | None = None,
                 ) -> TradeoffReport:
    """Train an RI baseline plus one PI model per R under identical seeds and
    iteration budgets; only the epoch plan differs between members."""
    if any(r < 1 for r in repeat_values):
        raise HarnessError(f"R values must be >= 1, got {repeat_values}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if videos is None:
        videos = load_training_videos(cfg.data.train_dir, cfg.data.sigma, cfg.data.scale)
    if eval_sets is None:
        eval_sets = {}
    set_names = sorted(eval_sets)

    members = [("base", "ri", cfg.train.repeats)]
    members += [(f"R{r}", "pi", r) for r in sorted(repeat_values)]
    rows = []
    for label, strategy, repeats in members:
        member_cfg = cfg.with_overrides(
            {"train.strategy": strategy, "train.repeats": repeats}
        )
        member_dir = out_dir / label
        snapshot_config(member_cfg, member_dir)
        try:
            result = bptt.run_training(
                member_cfg.model.to_model_spec(), videos,
                member_cfg.train.to_settings(), member_dir,
            )
            if result.diverged:
                raise bptt.DivergenceError("training diverged")
            model, _ = load_checkpoint(result.final_checkpoint)
            psnr, ssim = {}, {}
            for name in set_names:
                _, set_psnr, set_ssim = metrics.evaluate_set(model, eval_sets[name])
                psnr[name] = set_psnr
                ssim[name] = set_ssim
            ledger = result.ledger
            rows.append(TradeoffRow(
                label=label, repeats=repeats, is_base=(strategy == "ri"),
                status="ok", reported_ms=ledger.mean_reported_ms(),
                amortized_ms=float(np.mean([r.amortized_ms for r in ledger.rows])),
                psnr=psnr, ssim=ssim,
            ))
        except bptt.DivergenceError:
            rows.append(TradeoffRow(
                label=label, repeats=repeats, is_base=(strategy == "ri"),
                status="failed", reported_ms=float("nan"),
                amortized_ms=float("nan"), psnr={}, ssim={},
            ))
    base_rows = [r for r in rows if r.is_base]
    member_rows = sorted((r for r in rows if not r.is_base), key=lambda r: r.repeats)
    report = TradeoffReport(rows=base_rows + member_rows, set_names=set_names)
    report.write_csv(out_dir / "tradeoff.csv")
    report.write_scatter(out_dir / "tradeoff_scatter.csv")
    return report


# ---------------------------------------------------------------------------
# Plotting

def plot_history(csv_path: str | Path, out_path: str | Path) -> Path:
    """Per-frame PSNR history line plot, one labeled line per video id."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = _read_history_checked(csv_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for s in series:
        ax.plot(range(len(s.psnr)), s.psnr, label=s.video_id)
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _read_history_checked(csv_path: str | Path) -> list[metrics.MetricSeries]:
    path = Path(csv_path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) <= 1:
        raise HarnessError(f"empty CSV: {path}")
    header = rows[0]
    expected = ["video_id", "frame", "psnr", "ssim"]
    if header != expected:
        raise HarnessError(f"malformed CSV header in {path}: {header}")
    by_id: dict[str, metrics.MetricSeries] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            vid, _frame, psnr, ssim = row
            series = by_id.setdefault(vid, metrics.MetricSeries(vid, [], []))
            series.psnr.append(float(psnr))
            series.ssim.append(float(ssim))
        except ValueError as exc:
            raise HarnessError(f"malformed CSV row at line {lineno} in {path}: {exc}") from exc
    return list(by_id.values())


def plot_tradeoff(csv_path: str | Path, out_path: str | Path) -> Path:
    """Trade-off scatter: per-iteration training time vs PSNR."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(csv_path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) <= 1:
        raise HarnessError(f"empty CSV: {path}")
    if rows[0] != ["label", "time_ms", "psnr"]:
        raise HarnessError(f"malformed CSV header in {path}: {rows[0]}")
    labels, times, psnrs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            label, t, p = row
            labels.append(label)
            times.append(float(t))
            psnrs.append(float(p))
        except ValueError as exc:
            raise HarnessError(f"malformed CSV row at line {lineno} in {path}: {exc}") from exc
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(times, psnrs)
    for label, t, p in zip(labels, times, psnrs):
        ax.annotate(label, (t, p), textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("training time per iteration (ms)")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# CLI

def _load_frame(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _write_manifest(out: Path, generator: str, params: dict, seed: int | None) -> None:
    (out / "manifest.json").write_text(
        json.dumps({"generator": generator, "params": params, "seed": seed}, indent=2)
        + "\n"
    )


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_path(args.out)
    if args.generator == "static":
        video = synthgen.make_static(_load_frame(args.frame), args.length)
        params = {"frame": args.frame, "length": args.length}
    elif args.generator == "sliding":
        frame = _load_frame(args.frame)
        h, w, _ = frame.shape
        win_w = args.window_w or (3 * w) // 4
        win_h = args.window_h or (3 * h) // 4
        spec = synthgen.SlideSpec(window_w=win_w, window_h=win_h,
                                  slide=args.slide, path=args.slide_path)
        video = synthgen.make_sliding(frame, spec, args.length)
        params = {"frame": args.frame, "length": args.length, "slide": args.slide,
                  "window_w": win_w, "window_h": win_h, "path": args.slide_path}
    elif args.generator == "gamma":
        spec = synthgen.GammaSpec(gamma_min=args.gamma_min, gamma_max=args.gamma_max,
                                  period=args.period)
        video = synthgen.make_gamma(_load_frame(args.frame), spec, args.length)
        params = {"frame": args.frame, "length": args.length,
                  "gamma_min": args.gamma_min, "gamma_max": args.gamma_max,
                  "period": args.period}
    elif args.generator == "palindrome":
        video = synthgen.make_palindrome(videocore.load_video(args.input), args.length)
        params = {"input": args.input, "length": args.length}
    elif args.generator == "desk-data":
        out.mkdir(parents=True, exist_ok=True)
        for vid, hr in make_desk_videos(args.videos, args.frames, args.hr_size, args.seed):
            videocore.save_video(hr, out / vid)
        _write_manifest(out, "desk-data",
                        {"videos": args.videos, "frames": args.frames,
                         "hr_size": args.hr_size}, args.seed)
        print(f"wrote {args.videos} videos under {out}")
        return 0
    else:
        raise HarnessError(f"unknown generator: {args.generator}")
    videocore.save_video(video, out)
    _write_manifest(out, args.generator, params, args.seed)
    print(f"wrote {video.frame_count} frames to {out}")
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    video = videocore.load_video(args.input)
    lr = videocore.degrade(video, sigma=args.sigma, scale=args.scale)
    out = _out_path(args.out)
    videocore.save_video(lr, out)
    print(f"wrote {lr.frame_count} LR frames to {out}")
    return 0


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides: dict[str, object] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = yaml.safe_load(value)
    if getattr(args, "strategy", None):
        overrides["train.strategy"] = args.strategy
    if getattr(args, "repeats", None) is not None:
        overrides["train.repeats"] = args.repeats
    if getattr(args, "iterations", None) is not None:
        overrides["train.iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "cond_frame_number", False):
        overrides["model.condition_frame_number"] = True
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_dir = _out_path(cfg.out_dir)
    snapshot_config(cfg, out_dir)
    videos = load_training_videos(cfg.data.train_dir, cfg.data.sigma, cfg.data.scale)
    result = bptt.run_training(
        cfg.model.to_model_spec(), videos, cfg.train.to_settings(), out_dir
    )
    status = "diverged" if result.diverged else "ok"
    print(f"{status}: {result.iterations_done} iterations, "
          f"final checkpoint {result.final_checkpoint}")
    return 1 if result.diverged else 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.lr_only:
        lr = videocore.load_video(args.test_set)
        h, w = lr.data.shape[1], lr.data.shape[2]
        sr = metrics.super_resolve(model, torch.from_numpy(lr.data).to(torch.float32))
        videocore.save_video(VideoTensor(sr.numpy().astype(np.float64)), out_dir / "sr")
        print(f"saved {sr.shape[0]} SR frames ({h}x{w} -> {sr.shape[1]}x{sr.shape[2]})")
        return 0
    if args.scale != model.scale:
        raise HarnessError(
            f"scale mismatch: checkpoint is x{model.scale}, requested x{args.scale}"
        )
    pairs = load_eval_pairs(args.test_set, args.sigma, args.scale)
    series, set_psnr, set_ssim = metrics.evaluate_set(model, pairs)
    for s in series:
        metrics.write_series_csv(s, out_dir / f"history_{s.video_id}.csv")
    metrics.write_summary_csv(series, set_psnr, set_ssim, out_dir / "summary.csv")
    print(f"set mean: {set_psnr:.2f} dB / {set_ssim:.4f} SSIM over {len(series)} videos")
    return 0


def cmd_tradeoff(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    repeat_values = [int(x) for x in args.repeat_list.split(",") if x]
    out_dir = _out_path(args.out or cfg.out_dir)
    eval_sets = {}
    for entry in args.test_set or []:
        name = Path(entry).name
        eval_sets[name] = load_eval_pairs(entry, cfg.data.sigma, cfg.data.scale)
    report = run_tradeoff(cfg, repeat_values, out_dir, eval_sets=eval_sets)
    print(f"wrote {len(report.rows)} rows to {out_dir / 'tradeoff.csv'}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    if args.history:
        out = plot_history(args.history, _out_path(args.out))
    elif args.tradeoff:
        out = plot_tradeoff(args.tradeoff, _out_path(args.out))
    else:
        raise HarnessError("plot needs --history or --tradeoff")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsrlab",
        description="Train and stress-test recurrent video super-resolution networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic probe videos")
    p.add_argument("generator",
                   choices=["static", "sliding", "gamma", "palindrome", "desk-data"])
    p.add_argument("--frame", help="source frame image (static/sliding/gamma)")
    p.add_argument("--in", dest="input", help="source frame directory (palindrome)")
    p.add_argument("--length", type=int, default=300)
    p.add_argument("--slide", type=int, default=1)
    p.add_argument("--window-w", type=int, default=0)
    p.add_argument("--window-h", type=int, default=0)
    p.add_argument("--slide-path", default="horizontal-pingpong",
                   choices=list(synthgen.SLIDE_PATHS))
    p.add_argument("--gamma-min", type=float, default=0.5)
    p.add_argument("--gamma-max", type=float, default=1.5)
    p.add_argument("--period", type=int, default=60)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--hr-size", type=int, default=192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="HR frame directory -> LR frame directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_degrade)

    for name, fn in (("train", cmd_train), ("tradeoff", cmd_tradeoff)):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key")
        p.add_argument("--strategy", choices=list(bptt.STRATEGIES))
        p.add_argument("--R", dest="repeats", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--cond-frame-number", action="store_true")
        p.add_argument("--out")
        if name == "tradeoff":
            p.add_argument("--R-list", dest="repeat_list", required=True,
                           help="comma-separated reuse factors, e.g. 2,4,8")
            p.add_argument("--test-set", action="append")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-set", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--lr-only", action="store_true",
                   help="treat --test-set as LR frames; save SR frames, skip metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render history / trade-off plots")
    p.add_argument("--history")
    p.add_argument("--tradeoff")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (HarnessError, ConfigError, VideoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
