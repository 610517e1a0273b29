"""Exception hierarchy for edge-deid.

Library code raises these; the CLI maps them onto exit codes
(UsageError -> 2, every other EdgeDeidError -> 1).
"""

from typing import Any, Optional


class EdgeDeidError(Exception):
    """Base class for all edge-deid failures."""


class DimensionMismatchError(EdgeDeidError, ValueError):
    """Two images, masks or planes that must align do not."""


class IdentityRangeError(EdgeDeidError, ValueError):
    """An identity index outside the scene's identity range."""


class DegenerateRequestError(EdgeDeidError, ValueError):
    """A request that would be a no-op (same identity edit, identical twin prompts)."""


class EmptyRegionError(EdgeDeidError, ValueError):
    """A restriction mask or dataset that selects nothing."""


class TrainingFailure(EdgeDeidError):
    """Training produced a non-finite loss."""


class DivergenceError(EdgeDeidError):
    """An ODE state (sampler or edit displacement) became non-finite."""


class DegenerateGradientError(EdgeDeidError):
    """A gradient with no recoverable signal (all zeros)."""


class AuditFailure(EdgeDeidError):
    """A wire message failed the privacy audit and was not transmitted."""

    def __init__(self, reason: str, message: Any = None):
        super().__init__(reason)
        self.reason = reason
        self.message = message


class StageError(EdgeDeidError):
    """A pipeline stage failed; `stage` names which one."""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"stage '{stage}' failed{detail}")
        self.stage = stage
        self.cause = cause


class ImageReadError(EdgeDeidError, ValueError):
    """An input file exists but is not a readable image."""


class UsageError(EdgeDeidError):
    """Invalid command-line usage (bad flag, out-of-range value, unknown config key)."""
