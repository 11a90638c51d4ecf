"""Exception hierarchy shared by all minimt modules."""


class MinimtError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MinimtError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(MinimtError):
    """A configuration value is invalid or inconsistent."""


class InvalidMaskError(MinimtError):
    """An attention or softmax mask leaves a row with no valid entry."""


class ContractError(MinimtError):
    """An API precondition was violated (e.g. non-scalar loss for backward)."""


class InputError(MinimtError):
    """User-provided data is malformed (empty corpus, misaligned files, ...)."""


class FormatError(MinimtError):
    """A serialized artifact (checkpoint, state, vocabulary) cannot be parsed."""


class VersionError(FormatError):
    """A serialized artifact was written by an incompatible version."""


class NumericalError(MinimtError):
    """A numerical invariant broke (zero norm, non-finite gradient, ...)."""


class EvaluationError(MinimtError):
    """A function under test produced a non-finite value."""


class CapabilityError(MinimtError):
    """The requested feature is not supported by this model kind."""
