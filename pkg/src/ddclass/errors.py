"""Exception types raised across the package."""


class DDClassError(Exception):
    """Base class for all package errors."""


class ShapeError(DDClassError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DDClassError, ValueError):
    """A precondition of an operation was violated."""


class SingularMatrixError(DDClassError, ArithmeticError):
    pass


class NotPositiveDefiniteError(DDClassError, ArithmeticError):
    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} = {value:.6g}")


class ConvergenceError(DDClassError, ArithmeticError):
    pass


class NumericalError(DDClassError, ArithmeticError):
    pass


class NonFiniteGradientError(NumericalError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("non-finite gradient for parameter(s): " + ", ".join(self.names))


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class FormatError(DDClassError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class ConfigError(DDClassError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class PhaseError(DDClassError, RuntimeError):
    """Wraps a failure inside a pipeline phase, tagging which phase failed."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
