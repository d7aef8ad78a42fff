"""Exception types shared across the package."""


class PesqDnnError(Exception):
    """Base class for all package errors."""


class DimensionError(PesqDnnError, ValueError):
    pass


class ContractError(PesqDnnError, ValueError):
    pass


class InputTooShortError(PesqDnnError, ValueError):
    pass


class ValidationError(PesqDnnError, ValueError):
    pass


class ParameterError(PesqDnnError, ValueError):
    pass


class UndefinedCorrelationError(PesqDnnError, ArithmeticError):
    pass


class JoinError(PesqDnnError, KeyError):
    pass


class IntegrityError(PesqDnnError):
    pass


class UnsupportedVersionError(PesqDnnError):
    pass


class NonFiniteGradientError(PesqDnnError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class ExternalToolError(PesqDnnError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
