# utils/errors.py


class ChemotaxisError(Exception):
    """Base class for every error raised by the solver suite."""


class MeshMismatchError(ChemotaxisError, ValueError):
    pass


class NonNestedMeshError(ChemotaxisError, ValueError):
    pass


class InvalidStateError(ChemotaxisError, ValueError):
    pass


class ConfigError(ChemotaxisError, ValueError):
    pass


class DivergedRunError(ChemotaxisError, ArithmeticError):
    pass


class SingularSystemError(ChemotaxisError, ArithmeticError):
    """Zero pivot or unacceptable residual in a linear solve."""

    def __init__(self, message, step=None, t=None):
        self.step = step
        self.t = t
        where = ''
        if step is not None:
            where = f' (step {step}, t={t:.6g})' if t is not None else f' (step {step})'
        super().__init__(message + where)


class NonConvergenceError(ChemotaxisError):
    """Picard iteration reached its cap without meeting the tolerance."""

    def __init__(self, message, step=None, residual=None):
        self.step = step
        self.residual = residual
        super().__init__(f'{message} (step {step}, residual {residual:.3e})'
                         if residual is not None else message)
