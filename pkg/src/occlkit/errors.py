"""Exception hierarchy shared across the kit."""


class OcclkitError(Exception):
    """Base class for all kit errors."""


class ConfigurationError(OcclkitError):
    """Invalid configuration value (bad canvas, bad margins, ...)."""


class DomainError(OcclkitError):
    """Operation called outside its mathematical domain."""


class FormatError(OcclkitError):
    """On-disk data violates the panoptic / sidecar format contract."""


class ValidationError(OcclkitError):
    """An in-memory object violates one of its invariants."""


class ResampleSignal(OcclkitError):
    """A scene came out degenerate; the caller should retry with a new seed."""


class QuotaError(OcclkitError):
    """A per-level generation quota could not be filled."""

    def __init__(self, level, attempts):
        self.level = level
        self.attempts = attempts
        super().__init__(
            f"could not fill quota for occlusion level {level!r} "
            f"after {attempts} attempts"
        )


class TrainingAbort(OcclkitError):
    """Non-finite loss encountered during training."""
