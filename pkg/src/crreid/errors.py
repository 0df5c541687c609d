"""Exception types shared across the toolkit."""


class CRReIDError(Exception):
    """Base class for toolkit errors."""


class DomainError(CRReIDError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ShapeError(CRReIDError, ValueError):
    """Tensor or vector dimensions disagree with the expected layout."""


class NumericError(CRReIDError, ArithmeticError):
    """A loss or gradient became non-finite."""


class ConfigError(CRReIDError, ValueError):
    """Invalid run configuration. ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(CRReIDError):
    """Dataset is missing, malformed or unusable."""


class IncompatibleCheckpointError(CRReIDError):
    """Checkpoint layout does not match what the caller requires."""
