"""Exception hierarchy shared by every relikin module."""

from __future__ import annotations


class RelikinError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ShapeError(RelikinError, ValueError):
    exit_code = 3

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(RelikinError, FloatingPointError):
    exit_code = 4


class TapeError(RelikinError, RuntimeError):
    exit_code = 5


class ConfigError(RelikinError, ValueError):
    exit_code = 2


class DataFormatError(RelikinError, ValueError):
    """Malformed corpus or checkpoint file. Carries file/line/field when known."""

    exit_code = 6

    def __init__(self, message: str, path=None, line: int | None = None, field: str | None = None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class LeakageError(RelikinError, ValueError):
    """A subject appears in more than one split."""

    exit_code = 7
