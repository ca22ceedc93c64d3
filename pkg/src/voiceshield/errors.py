"""Exception hierarchy.

Every error carries a ``category`` string; the command line prints it as a
machine-parseable prefix and maps it to an exit code.
"""


class VoiceShieldError(Exception):
    category = "runtime"
    exit_code = 1


class ConfigError(VoiceShieldError, ValueError):
    category = "config"
    exit_code = 2


class MissingArtifactError(VoiceShieldError, FileNotFoundError):
    category = "artifact"
    exit_code = 3


class NumericalError(VoiceShieldError, ArithmeticError):
    category = "numerical"
    exit_code = 4


class PreconditionError(VoiceShieldError, ValueError):
    """Input violates an operation's documented precondition."""

    category = "precondition"
    exit_code = 4


class ShapeError(PreconditionError):
    category = "shape"


class TooShortError(PreconditionError):
    category = "too-short"


class WavError(VoiceShieldError, ValueError):
    category = "wav"
    exit_code = 3


class MalformedHeaderError(WavError):
    category = "wav-header"


class UnsupportedEncodingError(WavError):
    category = "wav-encoding"


class IntegrityError(VoiceShieldError, ValueError):
    category = "integrity"
    exit_code = 4
