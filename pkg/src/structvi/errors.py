"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A parameter lies outside the domain of its family or model."""


class ContractError(ValueError):
    """Caller broke an interface precondition (shape, family, or kind mismatch)."""


class NumericalError(RuntimeError):
    """A computation produced a non-finite or unfactorizable intermediate.

    The message names the offending term so failures in long training runs
    can be traced without a debugger.
    """


class ParseError(ValueError):
    """A data file could not be read; the message carries path and line number."""
