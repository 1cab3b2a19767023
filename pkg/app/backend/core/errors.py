"""Exception hierarchy shared by every dclnet module."""

from typing import Optional


class DclError(Exception):
    """Base class for all library errors."""


# --- tensors / shapes ---

class ShapeMismatch(DclError, ValueError):
    pass


class NonIntegralOutput(ShapeMismatch):
    """Stride/pad do not tile the input."""


class ShapeOverflow(DclError, OverflowError):
    pass


class NonFinite(DclError, FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


# --- architecture ---

class ParseError(DclError, ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"token {position}: {message}")
        self.position = position


class ShapeChainError(DclError, ValueError):
    def __init__(self, message: str, layer: int):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


class StaleCache(DclError, RuntimeError):
    pass


# --- dcl ---

class NegativeInput(DclError, ValueError):
    pass


class PreconditionViolated(DclError, ValueError):
    pass


# --- data ---

class BadMagic(DclError, ValueError):
    pass


class TruncatedFile(DclError, ValueError):
    pass


class CorruptFile(DclError, ValueError):
    """Well-framed file whose content does not decode."""


class DimMismatch(DclError, ValueError):
    pass


class EmptyInk(DclError, RuntimeError):
    pass


class UnknownPreset(DclError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown preset"


class SplitMismatch(DclError, ValueError):
    pass


# --- training / analysis ---

class Divergence(DclError, RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MissingDigitLabels(DclError, ValueError):
    pass


class NoDclBlock(DclError, ValueError):
    pass


class UnknownLayer(DclError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown layer"


class CostOverflow(DclError, OverflowError):
    pass


class ArchDataMismatch(DclError, ValueError):
    pass
