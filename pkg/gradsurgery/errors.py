"""
Exception hierarchy for gradsurgery.

Every error raised by the library derives from `GradSurgeryError`, so the
command layer can catch one type and report it as a failed `CommandResult`.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional


class GradSurgeryError(Exception):
    """Base class for all library errors."""


class ShapeError(GradSurgeryError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(GradSurgeryError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractError(GradSurgeryError, ValueError):
    """A structural contract between inputs is violated."""


class DomainError(GradSurgeryError, ValueError):
    """Inputs lie outside the domain where a formula is defined."""


class PreconditionError(GradSurgeryError, ValueError):
    """A documented precondition of an operation does not hold."""


class SpecParseError(ConfigError):
    """An experiment spec could not be parsed or validated."""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        self.path = Path(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = f"{self.path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class EmitError(GradSurgeryError, OSError):
    """Writing an output file failed."""

    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        super().__init__(f"Unable to write {self.path}: {reason}")
