"""Exception hierarchy shared across the package."""


class KgAlignError(Exception):
    """Base class for all package errors."""


class DataError(KgAlignError, ValueError):
    """Malformed or inconsistent input data (files, handles, label sets)."""


class ConfigError(KgAlignError, ValueError):
    """Invalid configuration values."""


class BudgetExhausted(KgAlignError):
    """Raised when a query is attempted after the annotation budget is spent."""


class BackendError(KgAlignError):
    """An annotator backend failed (e.g. transport errors after retries)."""
