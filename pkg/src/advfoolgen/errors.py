"""Exception types shared across the pipeline."""


class MissingDataError(FileNotFoundError):
    """Dataset or artifact files are absent from the configured location."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite; the run was aborted."""


class ConfigError(ValueError):
    """A configuration file or override is malformed or violates a constraint."""
