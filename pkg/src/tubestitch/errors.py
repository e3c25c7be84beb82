"""Exception types shared across the pipeline."""


class StitchError(Exception):
    """Base class for all pipeline errors."""


class FormatError(StitchError):
    """A file on disk violates one of the interchange formats."""


class GeometryError(StitchError):
    """Invalid unwrap/projection geometry (radii, centers, dimensions)."""


class MatchingError(StitchError):
    """Feature matching or match pooling could not produce usable output."""


class EstimationError(StitchError):
    """Model fitting (homography, offset selection) failed."""


class MetricsError(StitchError):
    """Evaluation inputs are unusable (size mismatch, degenerate samples)."""


class StageError(StitchError):
    """Wraps a module error with the failing stage and frame index attached."""

    def __init__(self, stage: str, frame_index, cause: BaseException):
        self.stage = stage
        self.frame_index = frame_index
        self.cause = cause
        where = f"stage '{stage}'"
        if frame_index is not None:
            where += f", frame {frame_index}"
        super().__init__(f"{where}: {cause}")
