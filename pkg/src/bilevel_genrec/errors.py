class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""
