"""Exception hierarchy shared by every module and mapped to CLI exit codes."""

from typing import Any, Dict, List, Optional


class RetinaPairError(Exception):
    """Base error. Carries a category and a process exit code."""

    category = "runtime"
    exit_code = 1

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.category,
            "message": self.message,
            "exit_code": self.exit_code,
        }


class ValidationError(RetinaPairError, ValueError):
    category = "validation"
    exit_code = 2


class ManifestError(ValidationError):
    """A manifest row failed to parse, decode or agree with its patient."""

    def __init__(self, message: str, row: Optional[int] = None) -> None:
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row

    def to_dict(self) -> Dict[str, Any]:
        body = super().to_dict()
        body["row"] = self.row
        return body


class TrainingAbortedError(RetinaPairError):
    """A loss term went non-finite; the step is not applied."""

    category = "training"
    exit_code = 3

    def __init__(
        self, term: str, diagnostics: Optional[Dict[str, Any]] = None
    ) -> None:
        super().__init__(f"non-finite loss term '{term}'")
        self.term = term
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> Dict[str, Any]:
        body = super().to_dict()
        body["term"] = self.term
        body["diagnostics"] = self.diagnostics
        return body


class CheckpointError(RetinaPairError):
    category = "checkpoint"
    exit_code = 4


class ConfigMismatchError(CheckpointError):
    """Resume refused because the stored config differs from the requested one."""

    def __init__(self, diff: List[str]) -> None:
        super().__init__("config mismatch on resume: " + "; ".join(diff))
        self.diff = diff

    def to_dict(self) -> Dict[str, Any]:
        body = super().to_dict()
        body["diff"] = self.diff
        return body
