"""Exception hierarchy shared by every subsystem.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class VtarError(Exception):
    exit_code = 1


class UsageError(VtarError):
    exit_code = 2


class ConfigError(VtarError):
    exit_code = 3


class NumericalError(VtarError):
    exit_code = 4


class ShapeError(VtarError, ValueError):
    exit_code = 4

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shown}")


class NonFiniteError(NumericalError):
    pass


class FrozenTensorError(NumericalError):
    """A gradient tried to reach a tensor that was frozen."""


class NondeterministicFunctionError(NumericalError):
    pass


class GateFailure(VtarError):
    exit_code = 5


class FormatError(VtarError, ValueError):
    """Malformed binary artifact; ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class VariantMismatchError(VtarError, ValueError):
    exit_code = 3
