"""vsrlab: training and stress-testing lab for recurrent video
super-resolution, built around hidden-state caching for truncated BPTT and
frame-number conditioning."""

from .bptt import (
    ClipRect,
    ClipSpec,
    EpochPlan,
    HiddenStateStore,
    MissingStateError,
    TimeLedger,
    TrainingVideo,
    TrainSettings,
    build_store,
    clip_loss,
    crop_epoch,
    pi_step,
    ri_step,
    run_training,
    sample_clip,
)
from .config import ExperimentConfig, load_preset
from .metrics import MetricSeries, evaluate_set, per_frame_history, psnr_y, ssim_y
from .model import (
    SENTINEL_INIT,
    ConditionSpec,
    DivergenceError,
    FlowWarpVSR,
    ModelSpec,
    RecurrentState,
    build_model,
    depth_to_space,
    frame_number_channel,
    init_state,
    load_checkpoint,
    save_checkpoint,
    space_to_depth,
    upscale_flow,
    warp,
)
from .synthgen import (
    GammaSpec,
    SlideSpec,
    make_gamma,
    make_palindrome,
    make_sliding,
    make_static,
)
from .videocore import VideoError, VideoTensor, degrade, load_video, rgb_to_y, save_video

__version__ = "0.1.0"
