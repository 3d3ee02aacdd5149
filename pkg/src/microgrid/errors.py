"""Exception hierarchy.

Three families map onto the CLI exit codes: :class:`ModelError` (2),
:class:`NumericalError` (3) and :class:`VerificationError` (4).
"""


class MicrogridError(Exception):
    """Base class for all package errors."""


class ModelError(MicrogridError, ValueError):
    """Invalid model data or configuration."""


class DuplicateNode(ModelError):
    pass


class UnknownEndpoint(ModelError):
    pass


class UnknownNode(ModelError, KeyError):
    pass


class DisconnectedGraph(ModelError):
    pass


class NonpositiveSusceptance(ModelError):
    pass


class NonpositiveParameter(ModelError):
    pass


class SizeMismatch(ModelError):
    pass


class ParseError(ModelError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ModelError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ValidationError(ModelError):
    pass


class NumericalError(MicrogridError, ArithmeticError):
    """A numerical procedure failed."""


class NonpositiveVoltage(NumericalError):
    pass


class ZeroFrequency(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class AlgebraicSolveFailed(NumericalError):
    pass


class StepRejected(NumericalError):
    pass


class VerificationError(MicrogridError, AssertionError):
    """A structural or steady-state property does not hold."""


class PropositionViolated(VerificationError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class StructureViolated(VerificationError):
    pass
