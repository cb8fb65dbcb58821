"""Exception types shared across the package.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class OvertrainError(Exception):
    exit_code = 1


class InvalidParameterError(OvertrainError, ValueError):
    exit_code = 3


class CapacityError(OvertrainError, ValueError):
    exit_code = 3


class ValidationError(OvertrainError, ValueError):
    exit_code = 3


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyMatrixError(OvertrainError, ValueError):
    exit_code = 3


class ClassSizeError(OvertrainError, ValueError):
    exit_code = 3


class FoldInfeasibleError(ClassSizeError):
    pass


class NumericOverflowError(OvertrainError, ArithmeticError):
    exit_code = 4

    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"non-finite activation in layer {layer!r}")


class DivergenceError(OvertrainError, ArithmeticError):
    exit_code = 4

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class SingularityError(OvertrainError, ArithmeticError):
    exit_code = 4


class ConvergenceError(OvertrainError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, grad_norm=None, index=None):
        self.grad_norm = grad_norm
        self.index = index
        super().__init__(message)


class BudgetError(OvertrainError, ArithmeticError):
    exit_code = 4
