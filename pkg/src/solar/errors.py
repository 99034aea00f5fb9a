class ValidationError(ValueError):
    """Raised when an input violates an operation's precondition."""


class StoreFormatError(ValidationError):
    """Malformed descriptor store or checkpoint file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or parameter."""
