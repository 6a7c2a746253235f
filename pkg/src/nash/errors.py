"""Exception types shared across the package.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2,
NumericAbortError -> 3, FormatError -> 4.
"""


class InvalidArgumentError(ValueError):
    """A caller-supplied value violates an operation's precondition."""


class InvalidStateError(RuntimeError):
    """An operation was invoked on an object in a state it cannot handle."""


class FormatError(ValueError):
    """A binary or serialized artifact does not match its declared layout."""


class ConfigError(ValueError):
    """A run configuration failed schema validation."""


class NumericAbortError(RuntimeError):
    """Training produced a non-finite loss; aborts with diagnostics."""


class UnsupportedOpError(ValueError):
    """A model layer has no lowering to the inference IR."""
