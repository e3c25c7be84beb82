"""Unfold in-tube video frames around the depth center and stitch the
unfolded strips into a panorama of the tube's inner surface."""

__version__ = "0.1.0"

from .compose import Panorama, composite, cylindrical_project, post_stitch_adjust
from .config import (ConfigError, FeatureConfig, MsacConfig, PipelineConfig,
                     PoolConfig)
from .errors import (EstimationError, FormatError, GeometryError,
                     MatchingError, MetricsError, StageError, StitchError)
from .frames import Frame, FrameSequence, load_sequence
from .metrics import MetricsReport, rmse, ssim, wilcoxon_signed_rank
from .offsetopt import (OffsetCandidate, OffsetRecord, StitchParams,
                        horizontal_displacement, optimal_offset)
from .pipeline import run_pipeline
from .unfold import (DepthTrack, UnfoldedFrame, build_depth_track,
                     locate_depth_center, unwrap_annulus)

__all__ = [
    "__version__",
    "Panorama", "composite", "cylindrical_project", "post_stitch_adjust",
    "ConfigError", "FeatureConfig", "MsacConfig", "PipelineConfig", "PoolConfig",
    "EstimationError", "FormatError", "GeometryError", "MatchingError",
    "MetricsError", "StageError", "StitchError",
    "Frame", "FrameSequence", "load_sequence",
    "MetricsReport", "rmse", "ssim", "wilcoxon_signed_rank",
    "OffsetCandidate", "OffsetRecord", "StitchParams",
    "horizontal_displacement", "optimal_offset",
    "run_pipeline",
    "DepthTrack", "UnfoldedFrame", "build_depth_track",
    "locate_depth_center", "unwrap_annulus",
]
