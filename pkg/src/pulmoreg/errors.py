"""Exception types shared by the library and mapped to CLI exit codes."""


class ValidationError(ValueError):
    """Inputs are malformed or inconsistent (exit code 1)."""


class NumericalError(RuntimeError):
    """The numerical pipeline could not proceed (exit code 2)."""


class FoldError(NumericalError):
    """A transformation that must be fold-free is not (infinite objective)."""
