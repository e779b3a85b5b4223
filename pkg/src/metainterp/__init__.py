"""Meta-learned, scene-adaptive video frame interpolation at desk scale."""

from .model import Arch, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .tasks import Task, Triplet, make_task, sample_batch, synth_sequence
from .training import AdaptConfig, MetaConfig, inner_adapt, meta_train, outer_step
from .adapt import adapt_and_interpolate, interpolate_sequence
from .evaluate import psnr

__all__ = [
    "Arch",
    "ModelParams",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "Task",
    "Triplet",
    "make_task",
    "sample_batch",
    "synth_sequence",
    "AdaptConfig",
    "MetaConfig",
    "inner_adapt",
    "meta_train",
    "outer_step",
    "adapt_and_interpolate",
    "interpolate_sequence",
    "psnr",
]
