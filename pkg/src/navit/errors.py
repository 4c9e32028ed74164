"""Exception hierarchy shared across the package."""


class NavitError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(NavitError, ValueError):
    """Invalid configuration or distribution parameters."""

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class DimensionError(NavitError, ValueError):
    """Operand shapes are incompatible."""


class EvaluationError(NavitError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class FormatError(NavitError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class RangeError(NavitError, IndexError):
    """A positional coordinate lies outside an embedding table."""


class OversizeError(NavitError, ValueError):
    """An example holds more tokens than a packed sequence."""

    def __init__(self, example_id, tokens, seq_len):
        self.example_id = example_id
        super().__init__(
            f"example {example_id} has {tokens} tokens, exceeding sequence length {seq_len}"
        )


class IntegrityError(NavitError, ValueError):
    """Batch and mask metadata disagree."""


class DegenerateBatchError(NavitError, ValueError):
    """A loss was asked to reduce over too few real examples."""


class NonFiniteLossError(NavitError, ArithmeticError):
    """Training produced a non-finite loss."""
