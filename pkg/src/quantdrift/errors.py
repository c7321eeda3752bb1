"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class IntegrationError(RuntimeError):
    """The pendulum integrator produced a non-finite state."""


class CurationError(RuntimeError):
    """A quantity bin could not be filled within the attempt budget."""

    def __init__(self, bin_index, lo, hi, attempts):
        self.bin_index = bin_index
        super().__init__(
            f"bin {bin_index} [{lo:g}, {hi:g}) still unfilled after {attempts} proposals"
        )


class NonDifferentiableOrbitError(ArithmeticError):
    """The orbit visits a point where the map derivative vanishes or is undefined."""


class DegeneratePosteriorError(ArithmeticError):
    """Every posterior weight underflowed to zero."""


class IncompatibleBinsError(ValueError):
    """Two binned objects do not share bin edges."""


class ConfigError(ValueError):
    """A run configuration document failed validation.

    ``path`` is the dotted location of the offending field.
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IngestError(ValueError):
    """An external trajectory file is malformed."""
