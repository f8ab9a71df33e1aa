"""
Custom exceptions for the reconstruction package.
"""


class ReconError(Exception):
    """Base class for reconstruction errors."""


class DomainError(ReconError, ValueError):
    # Input outside an operation's domain (bad pixel, timestep, shape, ...).
    pass


class SceneGenerationError(ReconError):
    def __init__(self, seed, attempts):
        super().__init__(
            f"Could not place scene objects without overlap (seed={seed}, attempts={attempts})"
        )


class ConfigValidationError(ReconError):
    # Raised when config validation fails (invalid structure or unsupported options).
    pass


class TrainingError(ReconError):
    pass


class EvaluationError(ReconError):
    pass


class GenerationError(ReconError):
    pass


class UnsupportedOptionError(ReconError):
    def __init__(self, kind, name, supported):
        super().__init__(f"Unsupported {kind}: {name!r}. Supported: {sorted(supported)}")
