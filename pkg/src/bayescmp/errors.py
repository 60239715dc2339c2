"""Exception hierarchy shared across the package.

Every error raised by the library derives from :class:`BayescmpError` so the
CLI can map failures to a single machine-parsable error class line.
"""


class BayescmpError(Exception):
    """Base class for all library errors."""


class ParameterDomainError(BayescmpError, ValueError):
    """A distribution or model parameter is outside its valid domain."""


class InputError(BayescmpError, ValueError):
    """Malformed data input (wrong shape, empty where non-empty required)."""


class ConfigError(BayescmpError, ValueError):
    """Invalid experiment or training configuration."""


class MissingArtifactError(BayescmpError, FileNotFoundError):
    """A required file (dataset, network, basis) does not exist."""


class SimulationDivergenceError(BayescmpError, ArithmeticError):
    """A simulation produced non-finite state."""


class TrainingDivergenceError(BayescmpError, ArithmeticError):
    """Training produced a non-finite loss or non-finite network outputs."""
