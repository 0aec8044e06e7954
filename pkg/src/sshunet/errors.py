"""Exception types raised across the package."""


class ArgumentError(ValueError):
    """Invalid argument: bad shape, permutation, channel count, ..."""


class DegenerateInputError(ArgumentError):
    """Input too small for the requested statistic (e.g. single-voxel instance norm)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid configuration. ``violations`` lists every problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CheckpointError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed file (bad magic, truncated header, ...)."""


class UnsupportedError(NotImplementedError):
    pass


class SpecError(ValueError):
    """Phantom specification does not fit its volume."""


class TrainingAborted(RuntimeError):
    """Non-finite loss during training; message carries step, lr and grad norms."""
