"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class FAError(Exception):
    """Base class for all package errors."""


class ConfigError(FAError, ValueError):
    """Invalid parameter or configuration."""


class VocabularyError(ConfigError, KeyError):
    """A token has no embedding row in the encoder vocabulary."""

    def __init__(self, token):
        self.token = token
        super().__init__(f"token {token!r} is not in the encoder vocabulary")

    def __str__(self):
        return self.args[0]


class ContextLengthError(ConfigError):
    """Prompt token count exceeds the encoder's maximum context length."""


class DimensionError(ConfigError):
    """Array shape does not match what the encoder or scorer expects."""


class DataError(FAError):
    """Missing, malformed or insufficient dataset content."""


class FormatError(DataError):
    """A file does not follow its declared on-disk format."""


class NumericError(FAError, ArithmeticError):
    """Non-finite value encountered during optimisation."""
