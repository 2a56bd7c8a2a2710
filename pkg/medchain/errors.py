from typing import Any


class MedchainException(Exception):
    exit_code = 3

    @property
    def reason(self) -> str:
        return type(self).__name__

    def details(self) -> dict[str, Any]:
        return {}


class UsageError(MedchainException):
    """The command line could not be parsed."""

    exit_code = 1


class InvalidInput(MedchainException, ValueError):
    """An argument violates the invariants of its domain type."""

    exit_code = 2


class IncompleteData(InvalidInput):
    """A patient channel is missing one of the before/during/after sessions."""

    def __init__(self, message: str, patient_id: str | None = None, channel_id: int | None = None) -> None:
        super(IncompleteData, self).__init__(message)

        self.patient_id = patient_id
        self.channel_id = channel_id

    def details(self) -> dict[str, Any]:
        return {"patient": self.patient_id, "channel": self.channel_id}


class BaselineDegenerate(MedchainException):
    """The cohort mean of delta is not positive, so kappa cannot be normalized."""

    pass


class Instability(MedchainException):
    """The aggregate arrival rate reaches or exceeds the service rate."""

    def __init__(self, message: str, margin: float | None = None) -> None:
        super(Instability, self).__init__(message)

        self.margin = margin

    def details(self) -> dict[str, Any]:
        return {"margin": self.margin}


class ConstraintViolation(MedchainException):
    """A validator is paid less than its compute bill (c_i < rho_i * x_i)."""

    pass


class Infeasible(MedchainException):
    """The validator pool cannot satisfy the configuration bounds."""

    pass


class SimulationError(MedchainException):
    """The event loop reached a state it should never reach."""

    pass


class ConfigurationError(MedchainException):
    """A scenario or channel table is unusable."""

    exit_code = 2

    def __init__(self, message: str, field: str | None = None) -> None:
        super(ConfigurationError, self).__init__(message)

        self.field = field

    def details(self) -> dict[str, Any]:
        return {"field": self.field} if self.field is not None else {}


class ScenarioParseError(ConfigurationError):
    """The scenario file is not valid YAML."""

    def __init__(self, message: str, line: int | None = None) -> None:
        super(ScenarioParseError, self).__init__(message)

        self.line = line

    def details(self) -> dict[str, Any]:
        return {"line": self.line}


class ScenarioValidationError(ConfigurationError):
    """A scenario value is missing, unknown or out of range."""

    pass


class ReferentialError(ConfigurationError):
    """A scenario section references an id that does not exist."""

    pass


class SignalParseError(MedchainException):
    """A row of the signal CSV is malformed."""

    exit_code = 2

    def __init__(self, message: str, row: int | None = None) -> None:
        super(SignalParseError, self).__init__(message)

        self.row = row

    def details(self) -> dict[str, Any]:
        return {"row": self.row}


def exception_class_for_reason(reason: str) -> type[MedchainException]:
    return {
        "UsageError": UsageError,
        "InvalidInput": InvalidInput,
        "IncompleteData": IncompleteData,
        "BaselineDegenerate": BaselineDegenerate,
        "Instability": Instability,
        "ConstraintViolation": ConstraintViolation,
        "Infeasible": Infeasible,
        "SimulationError": SimulationError,
        "ConfigurationError": ConfigurationError,
        "ScenarioParseError": ScenarioParseError,
        "ScenarioValidationError": ScenarioValidationError,
        "ReferentialError": ReferentialError,
        "SignalParseError": SignalParseError,
    }[reason]
