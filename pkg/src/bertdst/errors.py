"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DSTError(Exception):
    exit_code = 1


class InputError(DSTError):
    """Bad or missing input files."""

    exit_code = 2


class IoError(InputError):
    pass


class ParseError(InputError):
    exit_code = 3


class MissingField(ParseError):
    pass


class DuplicateSlot(ParseError):
    pass


class EmptyValueList(ParseError):
    pass


class LabelNotInOntology(ParseError):
    pass


class ChecksumMismatch(ParseError):
    exit_code = 4


class VersionUnsupported(ParseError):
    exit_code = 4


class ConfigError(DSTError):
    exit_code = 5


class InvalidConfig(ConfigError):
    pass


class InvalidSpec(ConfigError):
    pass


class TargetSizeTooSmall(ConfigError):
    pass


class EmptyCorpus(ConfigError):
    pass


class TooFewTurns(ConfigError):
    pass


class ShapeError(DSTError):
    exit_code = 6


class CandidateTooLong(ShapeError):
    pass


class InputTooLong(ShapeError):
    pass


class IdOutOfRange(ShapeError):
    pass


class ShapeMismatch(ShapeError):
    pass


class LengthMismatch(ShapeError):
    pass


class VocabMismatch(ShapeError):
    pass


class NothingToMask(ShapeError):
    pass


class NumericError(DSTError):
    exit_code = 7


class NonFiniteInput(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ConflictingValues(DSTError):
    exit_code = 8
