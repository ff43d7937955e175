"""Exception types shared across the package."""


class RegMktError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RegMktError, ValueError):
    pass


class InvariantViolation(RegMktError, ArithmeticError):
    """An internal numerical invariant (e.g. positive definiteness) was broken."""


class UnsupportedDesign(RegMktError, ValueError):
    pass


class CapacityError(RegMktError):
    """Exact enumeration would exceed the configured coalition cap."""


class ConfigurationError(RegMktError, ValueError):
    pass


class SequencingError(RegMktError):
    """Market steps were cleared out of order."""


class ParseError(RegMktError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(RegMktError, ValueError):
    pass
