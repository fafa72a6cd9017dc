"""Exception hierarchy shared by every pipeline stage."""


class RegimecastError(Exception):
    """Base class for all library errors."""


class ParseError(RegimecastError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(RegimecastError):
    pass


class GapError(ValidationError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(str(t) for t in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"{len(self.missing)} missing minute(s): {shown}{more}")


class InsufficientDataError(RegimecastError):
    pass


class InsufficientHistoryError(InsufficientDataError):
    def __init__(self, indicator, needed, available):
        self.indicator = indicator
        super().__init__(
            f"{indicator} needs {needed} minutes of history, only {available} available"
        )


class DomainError(RegimecastError, ValueError):
    pass


class RateLimitError(RegimecastError):
    pass


class FitError(RegimecastError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class ModelError(RegimecastError):
    pass


class SplitError(RegimecastError):
    pass


class SchemaError(RegimecastError):
    """Interchange file has the wrong schema version or config hash."""


class StageError(RegimecastError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
