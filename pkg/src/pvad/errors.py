"""Exception hierarchy.  ``PvadError.exit_code`` maps onto CLI exit codes."""


class PvadError(Exception):
    exit_code = 2


class DimensionError(PvadError, ValueError):
    pass


class DegenerateInputError(PvadError, ValueError):
    pass


class LabelError(PvadError, ValueError):
    pass


class ContractError(PvadError, RuntimeError):
    pass


class WavFormatError(PvadError, ValueError):
    pass


class ConfigError(PvadError, ValueError):
    pass


class PowerUndefinedError(PvadError, ValueError):
    pass


class EnrollmentError(PvadError, ValueError):
    pass


class PatchError(PvadError, ValueError):
    pass


class CorruptionError(PvadError, ValueError):
    pass


class CompatibilityError(PvadError, ValueError):
    pass


class ModeError(PvadError, ValueError):
    pass


class UndefinedMetricError(PvadError, ValueError):
    pass


class ComparabilityError(PvadError, ValueError):
    pass


class DivergenceError(PvadError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, last_finite_loss: float | None = None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
