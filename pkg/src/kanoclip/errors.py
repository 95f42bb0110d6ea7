"""Exception hierarchy.

Every error raised by the package derives from :class:`KanoclipError`; the
three intermediate classes map onto CLI exit codes (2 config, 3 data,
4 numeric).
"""


class KanoclipError(Exception):
    exit_code = 1


class ConfigError(KanoclipError):
    exit_code = 2


class DataError(KanoclipError):
    exit_code = 3


class NumericError(KanoclipError):
    exit_code = 4


# config / contract violations
class InvalidConfig(ConfigError, ValueError):
    pass


class EmptyClassName(ConfigError, ValueError):
    pass


class SchemaMismatch(ConfigError):
    pass


class ShapeMismatch(ConfigError, ValueError):
    pass


class MissingStage(ConfigError, ValueError):
    pass


# knowledge base
class UnknownClass(DataError, KeyError):
    pass


class EmptyKnowledge(DataError):
    pass


class InsufficientDescriptions(DataError):
    pass


class ClientFailure(DataError):
    pass


class EncoderFailure(DataError):
    pass


# data / io
class IOFailure(DataError, OSError):
    pass


class UnreadableImage(DataError):
    pass


class LayoutViolation(DataError):
    pass


class MissingMask(DataError):
    pass


class DatasetEmpty(DataError):
    pass


class DegenerateLabels(DataError, ValueError):
    pass


class WeightLoadFailure(DataError):
    pass


class HashMismatch(DataError):
    pass


# numerics
class ZeroNormVector(NumericError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    pass


class OutOfRangeScore(NumericError, ValueError):
    pass
