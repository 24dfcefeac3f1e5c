# mvrepose/exceptions.py

class ReposeError(Exception):
    """Base error; exit_code is what the CLI returns to the shell."""
    def __init__(self, message: str, exit_code: int = 1):
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)

class InvalidImageError(ReposeError):
    """Image grid out of range, wrong shape or unreadable file"""
    def __init__(self, message: str = "Invalid image"):
        super().__init__(message, 1)

class ShapeMismatchError(ReposeError):
    def __init__(self, message: str = "Shape mismatch"):
        super().__init__(message, 1)

class InvalidPoseError(ReposeError):
    """Pose outside articulation limits or zoom range"""
    def __init__(self, message: str = "Invalid pose"):
        super().__init__(message, 1)

class DegeneratePoseError(InvalidPoseError):
    def __init__(self, message: str = "Degenerate pose: zero-length limb"):
        super().__init__(message)

class DatasetError(ReposeError):
    """Missing dataset, unwritable output directory, malformed manifest"""
    def __init__(self, message: str = "Dataset error"):
        super().__init__(message, 1)

class EmptyManifestError(ReposeError):
    def __init__(self, message: str = "empty manifest"):
        super().__init__(message, 2)

class ConfigError(ReposeError):
    def __init__(self, message: str = "Invalid configuration"):
        super().__init__(message, 2)

class ConfigMismatchError(ConfigError):
    """Checkpoint config hash does not match the config or the data"""
    def __init__(self, message: str = "Config hash mismatch"):
        super().__init__(message)

class CheckpointLoadError(ReposeError):
    def __init__(self, message: str = "Failed to load checkpoint"):
        super().__init__(message, 1)

class NonFiniteLossError(ReposeError):
    """Training loss became NaN/inf; breakdown holds the last components."""
    def __init__(self, message: str = "Non-finite loss", breakdown: dict | None = None):
        self.breakdown = dict(breakdown or {})
        super().__init__(message, 3)

class MetricError(ReposeError):
    def __init__(self, message: str = "Metric precondition failed"):
        super().__init__(message, 1)

class MissingSegmentationError(ReposeError):
    def __init__(self, message: str = "View has no segmentation labels"):
        super().__init__(message, 1)
