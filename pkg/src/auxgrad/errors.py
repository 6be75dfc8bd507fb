"""Exception hierarchy for auxgrad."""


class AuxGradError(Exception):
    """Base class for all library errors."""


class NonFiniteInput(AuxGradError, ValueError):
    pass


class AllRowsDegenerate(AuxGradError):
    """Every input row fell below the drop tolerance during orthonormalization."""


class DimensionMismatch(AuxGradError, ValueError):
    pass


class ZeroVector(AuxGradError, ValueError):
    pass


class ConvergenceFailure(AuxGradError):
    pass


class NonFiniteActivation(AuxGradError, FloatingPointError):
    pass


class JacobianTooLarge(AuxGradError, ValueError):
    pass


class DegeneratePrimaryGradient(AuxGradError):
    """The primary gradient is (numerically) zero, so no subspace can be built."""


class ZeroPrimary(AuxGradError, ValueError):
    pass


class ConfigInvalid(AuxGradError, ValueError):
    pass


class SpecInvalid(AuxGradError, ValueError):
    pass


class ParseError(AuxGradError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaMismatch(AuxGradError, ValueError):
    pass


class InsufficientExamples(AuxGradError, ValueError):
    pass


class MissingDiagnostics(AuxGradError, FileNotFoundError):
    pass
