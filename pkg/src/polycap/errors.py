"""Exception hierarchy shared across the toolkit.

Every toolkit error carries a machine-parseable payload so the CLI can emit
structured diagnostics on stderr. ``exit_code`` follows the CLI contract:
2 for validation failures, 3 for runtime failures.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all structured toolkit errors."""

    exit_code = 2

    def __init__(self, message: str, *, items: list | None = None):
        super().__init__(message)
        self.message = message
        self.items = items or []

    def payload(self) -> dict:
        out = {"error": type(self).__name__, "message": self.message}
        if self.items:
            out["items"] = self.items
        return out


class ValidationError(ToolkitError):
    """Inputs failed fail-fast validation (bad file, missing item, bad config)."""

    exit_code = 2


class RuntimeFailure(ToolkitError):
    """An operation failed after inputs were accepted."""

    exit_code = 3
