"""Exception hierarchy.

Every error raised for bad input derives from :class:`ValidationError` (itself a
``ValueError``); the CLI maps those to exit code 2.
"""


class ValidationError(ValueError):
    """Input failed a precondition."""


class EmptyDataset(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class FeatureCountMismatch(ValidationError):
    pass


class EmptyTreeSubset(ValidationError):
    pass


class NotAProbabilityVector(ValidationError):
    pass


class ClassOutOfRange(ValidationError):
    pass


class UOutOfRange(ValidationError):
    pass


class AlphaOutOfRange(ValidationError):
    pass


class InvalidKn(ValidationError):
    pass


class KOutOfRange(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class TaskMismatch(ValidationError):
    pass


class AllSamplesInBag(ValidationError):
    pass


class NoActiveSamples(ValidationError):
    pass


class TuningTooSmall(ValidationError):
    pass


class BadProbabilityRow(ValidationError):
    pass


class BadProbabilitySlice(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class NonNumericFeature(ValidationError):
    pass


class EmptyFile(ValidationError):
    pass


class BundleFormatError(ValidationError):
    pass
