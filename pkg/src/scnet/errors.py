"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented exit statuses without a lookup table.
"""


class ScnError(Exception):
    exit_code = 2


class UsageError(ScnError):
    exit_code = 1


class ConfigError(UsageError):
    pass


# -- data / format errors (exit 2) -------------------------------------------

class FormatError(ScnError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class DataError(ScnError):
    pass


class InvalidSplit(DataError):
    pass


class EmptySubset(DataError):
    pass


class ZeroVariance(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DuplicateCoordinate(DataError):
    pass


class MaskMismatch(DataError):
    pass


class EmptyStage1(DataError):
    pass


class TooFewProfiles(DataError):
    pass


class ZeroNorm(DataError):
    pass


class UnstableSpec(DataError):
    pass


# -- numerical failures (exit 3) ---------------------------------------------

class NumericalError(ScnError):
    exit_code = 3


class SingularSystem(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass
