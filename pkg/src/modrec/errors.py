"""Exception hierarchy shared by all modrec modules.

The CLI maps these onto stable exit codes: contract/usage problems -> 2,
data and calibration problems -> 3, numerical divergence -> 4.
"""


class ModrecError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(ModrecError, ValueError):
    """An argument violates a documented precondition or shape contract."""


class UnknownSystemError(ContractError):
    """Lookup of a system name that is not in the registry."""


class CapacityError(ContractError):
    """A requested enumeration would overflow practical size limits."""


class DataFormatError(ModrecError, ValueError):
    """A config or data file could not be parsed.

    Carries enough context (path, line number, field) to point at the
    offending input.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        if loc:
            message = f"{loc}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class InsufficientDataError(DataFormatError):
    """Not enough samples/rows for the requested operation."""


class CalibrationError(ModrecError, ValueError):
    """Cost-model calibration failed (too few rows or a degenerate fit)."""


class InfeasibleIIError(ContractError):
    """Requested initiation interval cannot satisfy a carried dependency."""


class DivergedError(ModrecError, RuntimeError):
    """An integration produced a non-finite or runaway state.

    ``step`` is the index of the integration step at which the blow-up was
    detected.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class TrainingDivergedError(DivergedError):
    """Parameters became non-finite during optimization.

    ``diagnostics`` is a dict with the epoch, batch and loss history at the
    point of failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
