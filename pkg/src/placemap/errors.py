"""Exception hierarchy with stable CLI exit codes.

Every error raised by this package derives from :class:`PlaceMapError` and
carries an ``exit_code`` used by the command-line entry points. Codes group
errors into documented families:

* 2 -- input errors (missing files, unresolvable identifiers)
* 3 -- format errors (bad magic, wrong version, truncated binary payloads)
* 4 -- configuration errors (invalid parameters, unsupported combinations)
* 5 -- data errors (wrong shapes, non-finite or degenerate values)
* 6 -- numeric errors (rank failures, degenerate places, empty maps)
"""


class PlaceMapError(Exception):
    """Base class for all errors raised by placemap."""

    exit_code = 1


class InputError(PlaceMapError):
    """A required input (file, identifier) is missing or unresolvable."""

    exit_code = 2


class EvaluationError(InputError):
    """Evaluation inputs are inconsistent, e.g. queries without ground truth."""


class FormatError(PlaceMapError):
    """A binary or JSON artifact does not match its declared format."""

    exit_code = 3


class ConfigError(PlaceMapError):
    """A configuration object is invalid or internally inconsistent."""

    exit_code = 4


class ParameterError(ConfigError):
    """A single parameter value is out of range or of the wrong kind."""


class CapabilityError(ConfigError):
    """The requested operation needs data the inputs do not carry."""


class DataError(PlaceMapError):
    """Payload data violates an invariant (non-finite entries, bad metadata)."""

    exit_code = 5


class ShapeError(DataError):
    """Array dimensions disagree with the declared or expected shape."""


class DegenerateInputError(DataError):
    """An input is degenerate for the requested operation (e.g. zero vector)."""


class NumericError(PlaceMapError):
    """A numeric procedure cannot produce a meaningful result."""

    exit_code = 6


class RankError(NumericError):
    """A matrix does not have the rank the operation requires."""


class DegeneratePlaceError(NumericError):
    """All of a place's columns are numerically dependent or zero."""


class EmptyMapError(NumericError):
    """Matching was attempted against a map with no subspaces."""


class DomainError(NumericError):
    """A scalar argument lies outside the mathematical domain."""


class HeadingUndefinedError(NumericError):
    """No positive heading contribution exists, so no heading is reported."""
