"""Exception hierarchy shared by the toolkit."""


class OffabError(Exception):
    """Base class for every error raised by offab."""


class ValidationError(OffabError, ValueError):
    """An input violates a documented invariant."""


class DegeneratePolicyError(OffabError):
    """A policy produced a non-finite log-probability."""


class UndefinedScoreError(OffabError):
    """A policy cannot score some contexts (unknown segment or item)."""

    def __init__(self, context_ids):
        self.context_ids = [int(i) for i in context_ids]
        shown = ", ".join(str(i) for i in self.context_ids[:10])
        more = "" if len(self.context_ids) <= 10 else f" (+{len(self.context_ids) - 10} more)"
        super().__init__(f"policy has no score for contexts: {shown}{more}")


class UndefinedEstimateError(OffabError):
    """An estimator's normalizer is zero."""


class DegenerateOverlapError(OffabError):
    """Rejection sampling or capping search ran out of budget."""

    def __init__(self, message, context_id=None):
        self.context_id = context_id
        super().__init__(message if context_id is None else f"{message} (context {context_id})")


class LogFormatError(OffabError):
    """A log file could not be ingested.

    ``code`` is one of the values in :data:`offab.logs.ERROR_CODES`; ``line``
    is the 1-based line number of the offending record when known.
    """

    def __init__(self, code: str, message: str, line: int | None = None):
        self.code = code
        self.line = line
        where = "" if line is None else f"line {line}: "
        super().__init__(f"[{code}] {where}{message}")
