"""Exception types shared across the package.

Everything derived from UserError is a problem with the user's inputs (bad
config, malformed file, shape mismatch) and maps to CLI exit code 1; any other
exception is an internal error and maps to exit code 2.
"""


class UserError(Exception):
    pass


class ConfigError(UserError):
    """Invalid hyperparameter, flag, or config-file entry."""


class DataError(UserError):
    """Corpus, token-stream, or id-range problem."""


class FormatError(UserError):
    """Malformed checkpoint, vocabulary, or N-best file."""


class ShapeError(UserError):
    """Tensor dimension mismatch; messages name both shapes."""


class NumericError(UserError):
    """Non-finite values where finite ones are required."""


class ContractError(UserError):
    """An API precondition was violated (e.g. non-scalar loss to backward)."""


class TrainingError(UserError):
    """Training aborted (e.g. non-finite loss); names the failing batch."""
