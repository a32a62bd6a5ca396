# iqa_forge/utils/enhanced_errors.py

from typing import Dict, Any, Optional, List
import traceback
import json
import logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3

EXIT_LABELS = {EXIT_VALIDATION: "invalid input", EXIT_IO: "i/o error", EXIT_INTERNAL: "internal error"}


class IQAForgeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_INTERNAL

    def __init__(self, message: str, code: str = "UNKNOWN_ERROR",
                 details: Optional[Dict[str, Any]] = None,
                 can_retry: bool = False,
                 suggestions: Optional[List[str]] = None,
                 original_exception: Optional[Exception] = None):
        super().__init__(message)
        self.message = message
        self.code = code
        self.details = details or {}
        self.can_retry = can_retry
        self.suggestions = suggestions or []
        self.original_exception = original_exception
        self.traceback = traceback.format_exc() if original_exception else None

    def to_dict(self) -> Dict[str, Any]:
        """Serializable form written to result.json and report ERROR blocks."""
        stage, _, _ = self.code.partition("_")
        return {
            "stage": stage.lower() if "_" in self.code else "general",
            "message": self.message,
            "code": self.code,
            "exit_code": self.exit_code,
            "details": self.details,
            "can_retry": self.can_retry,
            "suggestions": self.suggestions,
            "user_message": self.get_user_message(),
        }

    def get_user_message(self) -> str:
        label = EXIT_LABELS.get(self.exit_code, "error")
        lines = [f"[{label}] {self.message}"]
        lines.extend(f"  - {hint}" for hint in self.suggestions)
        return "\n".join(lines)

    def log(self, log_level=logging.ERROR) -> Dict[str, Any]:
        """Log the error with its details and return the serialized form."""
        error_dict = self.to_dict()
        context = f" {json.dumps(self.details, sort_keys=True, default=str)}" if self.details else ""
        logger.log(log_level, f"{self.code} (exit {self.exit_code}): {self.message}{context}")
        if self.traceback:
            logger.debug(f"Caused by:\n{self.traceback}")
        return error_dict


# Input validation errors (exit code 1)

class ValidationError(IQAForgeError):
    """Input data or arguments violate a documented precondition."""
    exit_code = EXIT_VALIDATION

    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "VALIDATION_ERROR")
        super().__init__(message, **kwargs)


# Image codec and pixel-level errors
class UnsupportedFormat(ValidationError):
    """Image format is not PNG or JPEG."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_UNSUPPORTED_FORMAT")
        kwargs.setdefault("suggestions", ["Convert the image to PNG or baseline JPEG"])
        super().__init__(message, **kwargs)

class MalformedFile(ValidationError):
    """Encoded image is truncated or corrupt."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_MALFORMED_FILE")
        kwargs.setdefault("suggestions", ["Re-export the image",
                                          "Check the file was fully copied"])
        super().__init__(message, **kwargs)

class QualityOutOfRange(ValidationError):
    """JPEG quality outside 1-100."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_QUALITY_OUT_OF_RANGE")
        super().__init__(message, **kwargs)

class InvalidDimensions(ValidationError):
    """Requested image dimensions are not positive."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_INVALID_DIMENSIONS")
        super().__init__(message, **kwargs)

class CropLargerThanImage(ValidationError):
    """Crop window exceeds the image."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_CROP_TOO_LARGE")
        super().__init__(message, **kwargs)

class ImageTooSmall(ValidationError):
    """Image is below the minimum feature-extraction size."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "IMAGE_TOO_SMALL")
        kwargs.setdefault("suggestions", ["Use an input size of at least 32 pixels"])
        super().__init__(message, **kwargs)

# Distortion errors
class InvalidSpec(ValidationError):
    """Distortion family, level or parameter is invalid."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DISTORT_INVALID_SPEC")
        super().__init__(message, **kwargs)

# Dataset errors
class EmptyRatings(ValidationError):
    """No ratings available to aggregate."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DATASET_EMPTY_RATINGS")
        super().__init__(message, **kwargs)

class ValueOutsideNativeRange(ValidationError):
    """Score lies outside the dataset's native range."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DATASET_VALUE_OUT_OF_RANGE")
        kwargs.setdefault("suggestions", ["Check the dataset descriptor's native_min/native_max"])
        super().__init__(message, **kwargs)

class MissingDescriptor(ValidationError):
    """A record's source has no dataset descriptor."""
    def __init__(self, message, source=None, **kwargs):
        kwargs.setdefault("code", "DATASET_MISSING_DESCRIPTOR")
        kwargs.setdefault("details", {}).update({"source": source})
        kwargs.setdefault("suggestions", ["Add the dataset to a descriptor file passed with --datasets"])
        super().__init__(message, **kwargs)

class InfeasiblePolicy(ValidationError):
    """Too few subjects for the dataset's split policy."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DATASET_INFEASIBLE_POLICY")
        super().__init__(message, **kwargs)

class DuplicateId(ValidationError):
    """Image ids are not unique."""
    def __init__(self, message, duplicates=None, **kwargs):
        kwargs.setdefault("code", "DATASET_DUPLICATE_ID")
        kwargs.setdefault("details", {}).update({"duplicates": list(duplicates or [])})
        super().__init__(message, **kwargs)

class EmptyPartition(ValidationError):
    """A required split partition holds no images."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DATASET_EMPTY_PARTITION")
        super().__init__(message, **kwargs)

class EmptyTestSet(ValidationError):
    """A test dataset has no images in the test partition."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "DATASET_EMPTY_TEST_SET")
        super().__init__(message, **kwargs)

class LeakageDetected(ValidationError):
    """The split plan fails the leakage audit."""
    def __init__(self, message, issues=None, **kwargs):
        kwargs.setdefault("code", "DATASET_LEAKAGE")
        kwargs.setdefault("details", {}).update({"issues": issues or []})
        super().__init__(message, **kwargs)

# Metric errors
class LengthMismatch(ValidationError):
    """Score vectors differ in length."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "METRIC_LENGTH_MISMATCH")
        super().__init__(message, **kwargs)

class DegenerateVector(ValidationError):
    """Score vector is constant or too short for a correlation."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "METRIC_DEGENERATE_VECTOR")
        kwargs.setdefault("suggestions", ["A constant prediction vector usually means the model collapsed"])
        super().__init__(message, **kwargs)

class EmptyInput(ValidationError):
    """Nothing to aggregate."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "METRIC_EMPTY_INPUT")
        super().__init__(message, **kwargs)

# Model errors
class DimensionMismatch(ValidationError):
    """Feature vector length does not match the network input."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "MODEL_DIMENSION_MISMATCH")
        super().__init__(message, **kwargs)

class EmptyCorpus(ValidationError):
    """Class weights need a non-empty training corpus."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "MODEL_EMPTY_CORPUS")
        super().__init__(message, **kwargs)

class ShapeMismatch(ValidationError):
    """Parameter and gradient shapes differ."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "MODEL_SHAPE_MISMATCH")
        super().__init__(message, **kwargs)

class StepOutOfRange(ValidationError):
    """Schedule step outside [0, total_steps)."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "MODEL_STEP_OUT_OF_RANGE")
        super().__init__(message, **kwargs)

class CheckpointFormatError(ValidationError):
    """Checkpoint file is not a valid container."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "MODEL_CHECKPOINT_FORMAT")
        super().__init__(message, **kwargs)

# Configuration and report errors
class ConfigError(ValidationError):
    """Configuration file failed validation."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "CONFIG_INVALID")
        super().__init__(message, **kwargs)

class EmptyReport(ValidationError):
    """No evaluation rows to report."""
    def __init__(self, message="empty report: no evaluation rows found", **kwargs):
        kwargs.setdefault("code", "REPORT_EMPTY")
        kwargs.setdefault("suggestions", ["Run the eval command before report"])
        super().__init__(message, **kwargs)

class LadderFormatError(ValidationError):
    """Ladder file line could not be parsed."""
    def __init__(self, message, line_number=None, **kwargs):
        kwargs.setdefault("code", "DISTORT_LADDER_FORMAT")
        kwargs.setdefault("details", {}).update({"line_number": line_number})
        super().__init__(message, **kwargs)
        self.line_number = line_number


class ManifestFormatError(ValidationError):
    """Manifest, ratings or plan file failed validation."""
    def __init__(self, message, path=None, issues=None, **kwargs):
        kwargs.setdefault("code", "DATASET_MANIFEST_FORMAT")
        kwargs.setdefault("details", {}).update({
            "path": str(path) if path is not None else None,
            "issues": issues or []
        })
        super().__init__(message, **kwargs)
        self.issues = issues or []


# I/O errors (exit code 2)

class IoError(IQAForgeError):
    """A path could not be read or written."""
    exit_code = EXIT_IO

    def __init__(self, message, path=None, **kwargs):
        kwargs.setdefault("code", "IO_ERROR")
        kwargs.setdefault("can_retry", True)
        kwargs.setdefault("details", {}).update({"path": str(path) if path is not None else None})
        kwargs.setdefault("suggestions", ["Check the path exists and is accessible"])
        super().__init__(message, **kwargs)
        self.path = path


# Internal errors (exit code 3)

class NoForwardState(IQAForgeError):
    """backward() called without a recorded train-mode forward pass."""
    def __init__(self, message="No recorded forward state; run forward in train mode first", **kwargs):
        kwargs.setdefault("code", "MODEL_NO_FORWARD_STATE")
        super().__init__(message, **kwargs)


class TrainingFailedError(IQAForgeError):
    """A training run could not produce a usable checkpoint."""
    def __init__(self, message, **kwargs):
        kwargs.setdefault("code", "TRAIN_FAILED")
        kwargs.setdefault("suggestions", ["Inspect the run log for the failing epoch",
                                          "Try a different seed or learning rate"])
        super().__init__(message, **kwargs)


def format_error_for_response(error: Exception) -> Dict[str, Any]:
    """Format any exception as a standardized error response."""
    if isinstance(error, IQAForgeError):
        return error.to_dict()
    return IQAForgeError(
        message=str(error),
        code="UNEXPECTED_ERROR",
        details={"error_type": error.__class__.__name__},
        can_retry=False,
        suggestions=["Rerun with IQA_FORGE_LOG=debug for the full traceback"]
    ).to_dict()


def format_user_friendly_error(error_data: Dict[str, Any]) -> str:
    """
    Format an error in a user-friendly way.

    Args:
        error_data: Error data dictionary as produced by ``to_dict``

    Returns:
        One-paragraph message for the command summary
    """
    stage = error_data.get("stage", "unknown")
    error_message = error_data.get("message", "Unknown error")

    stage_messages = {
        "image": "An image could not be processed",
        "distort": "The distortion ladder could not be applied",
        "dataset": "The dataset inputs are inconsistent",
        "metric": "A metric could not be computed",
        "model": "The model could not be evaluated",
        "train": "Training did not complete",
        "config": "The configuration is invalid",
        "report": "The report could not be built",
        "io": "A file could not be read or written",
        "unexpected": "An internal error occurred",
    }
    friendly_message = stage_messages.get(stage, "An error occurred")

    simplified_message = error_message
    if len(simplified_message) > 200:
        simplified_message = simplified_message[:200] + "..."
    friendly_message += f": {simplified_message}"

    line_number = error_data.get("details", {}).get("line_number")
    if line_number is not None:
        friendly_message += f" (line {line_number})"

    suggestions = error_data.get("suggestions") or []
    if suggestions:
        friendly_message += f". {suggestions[0]}."

    return friendly_message
