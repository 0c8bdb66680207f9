"""Exception hierarchy shared by all modules.

The CLI maps :class:`DataError` to exit code 3 and :class:`NumericError`
to exit code 4.
"""


class TtsError(Exception):
    pass


class DataError(TtsError, ValueError):
    """Bad input data: unparsable text, malformed files, missing ids."""


class NumericError(TtsError, ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""


class ShapeMismatch(TtsError, ValueError):
    def __init__(self, message, *shapes):
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {detail}" if detail else message)
        self.shapes = shapes
