"""Exception types shared across the toolkit."""


class PlayerReidError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(PlayerReidError):
    """Raised for missing, malformed or inconsistent dataset manifests."""


class AnnotationError(PlayerReidError):
    """Raised for invalid attribute annotation files."""


class ConfigError(PlayerReidError):
    """Raised for invalid or contradictory run configuration."""


class SamplerError(PlayerReidError):
    """Raised when a batch schedule cannot be built (e.g. too few players)."""


class RegistryError(PlayerReidError):
    """Raised for unknown encoder names or invalid layer tags."""


class WeightsUnavailableError(RegistryError):
    """Raised when pretrained weights cannot be resolved locally or offline."""


class CheckpointError(PlayerReidError):
    """Raised for unreadable, corrupt or incompatible checkpoints."""


class EvaluationError(PlayerReidError):
    """Raised for invalid evaluation inputs (shape mismatch, empty query set)."""


class JointSpaceError(PlayerReidError):
    """Raised when text prompts are paired with an encoder that left the
    shared image-text space (projection dropped or weights fine-tuned)."""


class TrainingDivergedError(PlayerReidError):
    """Raised when the loss becomes non-finite; carries logit diagnostics."""

    def __init__(self, message: str, logit_stats: dict | None = None):
        super().__init__(message)
        self.logit_stats = logit_stats or {}
