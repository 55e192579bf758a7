"""
Domain errors

Infeasible solutions are not errors; they are reported through evaluation
violations. These exceptions cover malformed inputs and misuse.
"""
from typing import Optional


class EdgeSelectorError(ValueError):
    """Base class for all domain errors"""


class InstanceParseError(EdgeSelectorError):
    """Malformed instance text; carries the offending 1-based line number"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidInstanceError(EdgeSelectorError):
    """Instance violates a structural invariant"""


class ModelFormatError(EdgeSelectorError):
    """Model file or model shapes are not what the caller expects"""


class DatasetError(EdgeSelectorError):
    """Training data cannot be used as given"""


class UnknownVariantError(EdgeSelectorError):
    """No preset with the requested name"""


class MissingBksError(EdgeSelectorError):
    """Benchmark instance without a best-known solution entry"""

    def __init__(self, instance_name: str):
        self.instance_name = instance_name
        super().__init__(f"no best-known solution registered for instance '{instance_name}'")


class ConvNetError(EdgeSelectorError):
    """Numerical failure inside the graph network"""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
