"""Exception types shared across the package.

ValueError is used for precondition violations on in-memory arguments;
the two classes here cover on-disk data and numerical failures so the CLI
can map them to distinct exit codes.
"""


class FormatError(Exception):
    """Malformed binary file; carries the byte offset of the violation."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


class NumericError(Exception):
    """Non-finite or otherwise unusable numerical state."""
