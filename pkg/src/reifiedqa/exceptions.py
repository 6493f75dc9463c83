"""Exception hierarchy shared across the package."""


class ReifiedQAError(Exception):
    """Base class for all package errors."""


class BuildError(ReifiedQAError, ValueError):
    pass


class CapacityError(BuildError):
    pass


class ShapeError(ReifiedQAError, ValueError):
    pass


class UnknownIdError(ReifiedQAError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep plain messages.
        return str(self.args[0]) if self.args else ""


class InputError(ReifiedQAError, ValueError):
    pass


class IngestError(ReifiedQAError, ValueError):
    pass


class ResolutionError(ReifiedQAError):
    """No candidate entity could be produced for a question."""


class CoverageError(ResolutionError):
    """The gold span is not among the enumerated candidate spans."""


class ParseError(ReifiedQAError, ValueError):
    def __init__(self, message, path=None, line_no=None):
        self.path = path
        self.line_no = line_no
        where = ""
        if path is not None:
            where = f"{path}:"
        if line_no is not None:
            where += f"{line_no}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class TrainingError(ReifiedQAError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ReifiedQAError, ValueError):
    pass
