"""tilevlm: a desk-scale tiled vision-language model.

High-resolution images are split into a global view plus tile-sized local
views, each view is encoded by a small ViT, token grids are mean-pooled by
a configurable window, frames share position IDs, and a decoder with
per-token-type QKV experts consumes the mixed sequence.
"""

from .budget import BudgetReport, image_budget, video_budget
from .encoder import EncoderConfig, TokenGrid, VisionEncoder
from .fpid import (
    PositionMode,
    SequenceLayout,
    TextSegment,
    VisualFrame,
    assign_positions,
    count_positions,
)
from .glhr import GridShape, SplitPlan, apply_split, compute_grid, plan_split
from .image import ContractError, ImageDims, PpmError, RasterImage, read_ppm, write_ppm
from .merger import MergeSpec, merge, merge_features, merged_token_count
from .pipeline import (
    GradCheckReport,
    GradInstance,
    PhaseConfig,
    TrainReport,
    default_phase_configs,
    grad_check,
    load_checkpoint,
    run_phase,
    run_training,
    save_checkpoint,
)
from .vlm import DecoderConfig, VisionLanguageModel, caption_accuracy, caption_loss

__version__ = "0.1.0"

__all__ = [
    "BudgetReport",
    "ContractError",
    "DecoderConfig",
    "EncoderConfig",
    "GradCheckReport",
    "GradInstance",
    "GridShape",
    "ImageDims",
    "MergeSpec",
    "PhaseConfig",
    "PositionMode",
    "PpmError",
    "RasterImage",
    "SequenceLayout",
    "SplitPlan",
    "TextSegment",
    "TokenGrid",
    "TrainReport",
    "VisionEncoder",
    "VisionLanguageModel",
    "VisualFrame",
    "apply_split",
    "assign_positions",
    "caption_accuracy",
    "caption_loss",
    "compute_grid",
    "count_positions",
    "default_phase_configs",
    "grad_check",
    "image_budget",
    "load_checkpoint",
    "merge",
    "merge_features",
    "merged_token_count",
    "plan_split",
    "read_ppm",
    "run_phase",
    "run_training",
    "save_checkpoint",
    "video_budget",
    "write_ppm",
]
