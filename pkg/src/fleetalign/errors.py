"""Exception hierarchy. The CLI maps each family to its own exit code."""


class FleetAlignError(Exception):
    pass


class ConfigError(FleetAlignError, ValueError):
    pass


class DataError(FleetAlignError, ValueError):
    pass


class DivergenceError(FleetAlignError, RuntimeError):
    """Training produced a non-finite loss or a degenerate feature space."""


class CollapseError(DivergenceError):
    """All pairwise feature distances vanished."""
