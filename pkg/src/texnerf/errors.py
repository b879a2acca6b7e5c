"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError`
(the CLI maps it to exit status 1); numerical failures during a run derive
from :class:`TexNerfRuntimeError` (exit status 2).
"""


class TexNerfError(Exception):
    pass


class ValidationError(TexNerfError, ValueError):
    pass


class TexNerfRuntimeError(TexNerfError, RuntimeError):
    pass


class DomainError(ValidationError):
    pass


class OutOfBracketError(ValidationError):
    pass


class ExtrapolationError(ValidationError):
    pass


class SpectralLibraryError(ValidationError):
    """Malformed spectral library file or invalid curve."""

    def __init__(self, message, line=None, material=None):
        self.line = line
        self.material = material
        parts = []
        if material is not None:
            parts.append(f"material {material!r}")
        if line is not None:
            parts.append(f"line {line}")
        prefix = f"{', '.join(parts)}: " if parts else ""
        super().__init__(prefix + message)


class DegenerateEmissivityError(ValidationError):
    pass


class EmissivityCeilingError(ValidationError):
    pass


class NegativeEmissionError(ValidationError):
    pass


class NoSolutionError(TexNerfRuntimeError):
    pass


class MissingMaterialError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(TexNerfRuntimeError):
    """A parameter, gradient or loss became NaN/inf."""

    def __init__(self, message, name=None):
        self.name = name
        super().__init__(f"{name}: {message}" if name else message)
