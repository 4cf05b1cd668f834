"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
0 ok / 1 usage / 2 data / 3 numerical without a lookup table.
"""


class OcraError(Exception):
    exit_code = 2


class ConfigError(OcraError):
    exit_code = 1


class DataError(OcraError):
    exit_code = 2


class NumericalError(OcraError):
    exit_code = 3


class DimensionMismatch(DataError):
    pass


class FrameOutOfRange(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyList(DataError):
    pass


class EmptyManipCloud(DataError):
    pass


class FormatError(DataError):
    pass


class FlowTooLarge(DataError):
    pass


class MissingCache(DataError):
    pass


class StepOutOfRange(DataError):
    pass


class InvalidRange(ConfigError):
    pass


class NonPositiveDt(ConfigError):
    pass


class DegenerateRotation(NumericalError):
    pass


class DegenerateBaseline(NumericalError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class EmptyCorrespondenceSet(NumericalError):
    pass


class InsufficientTexture(UserWarning):
    """Warning (not an error): the reference image is too flat for reliable flow."""
