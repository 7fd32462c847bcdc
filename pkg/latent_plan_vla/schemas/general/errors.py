class LatentPlanError(Exception):
    """Root of every error raised by latent_plan_vla."""


class DomainError(LatentPlanError, ValueError):
    """An operation was called outside its declared domain."""


class ConfigError(LatentPlanError):
    """The run configuration could not be read or failed validation."""


class CheckpointError(LatentPlanError):
    """A TAKT container is malformed, truncated or of an unknown version."""


class TaskSamplingError(DomainError):
    """No solvable initial state was found within the retry budget."""
