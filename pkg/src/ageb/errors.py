"""Shared exception types.

The CLI maps these onto machine-parsable error categories:
ConfigError -> "config", FormatError and OSError -> "io", every other
ValueError (including ShapeError) -> "invariant".
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; message reports both."""


class ConfigError(ValueError):
    """A configuration value violates a stated constraint."""


class FormatError(ValueError):
    """A file does not match its declared binary or text layout."""
