"""Exception hierarchy mapped to CLI exit codes.

Exit code map: usage 1, data 2, training divergence 3, evaluation 4, judge 5.
"""


class KeylabError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(KeylabError):
    """Bad invocation: unknown strategy, invalid config value, missing file argument."""

    exit_code = 1


class DataError(KeylabError):
    """Corpus or dataset problem."""

    exit_code = 2


class CapacityError(DataError):
    """Requested more distinct examples than the task space contains."""


class DatasetFormatError(DataError):
    """Malformed dataset file; message names the offending line."""


class TagLiteralError(DataError):
    """A tag literal appeared inside a thinking or answer field."""


class UnknownSymbolError(DataError):
    """Text contains a character outside the supported alphabet."""


class TrainingDivergedError(KeylabError):
    """Non-finite loss during training; message carries step and example indices."""

    exit_code = 3


class EvaluationError(KeylabError):
    """Evaluation could not produce a report."""

    exit_code = 4


class JudgeError(KeylabError):
    """External judge failure."""

    exit_code = 5


class JudgeRequestError(JudgeError):
    """Transport failure after exhausting retries."""


class UnparseableVerdictError(JudgeError):
    """Judge reply carried no leading yes/no after exhausting retries."""


class MissingApiKeyError(JudgeError):
    """The configured API-key environment variable is unset."""
