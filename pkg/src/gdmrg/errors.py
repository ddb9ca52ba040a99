from __future__ import annotations


class GdmrgError(Exception):
    """Base class for every error raised by the gdmrg package."""


class ShapeError(GdmrgError, ValueError):
    def __init__(self, op: str, left, right, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: shape mismatch {self.left} vs {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(GdmrgError, ValueError):
    """Invalid or unknown configuration. CLI exit code 2."""


class DataError(GdmrgError, ValueError):
    """Malformed dataset / checkpoint / embedding file. CLI exit code 3."""
