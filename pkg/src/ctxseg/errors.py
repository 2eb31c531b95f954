"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class GraphError(RuntimeError):
    """Autodiff graph misuse, e.g. backward through an already-consumed graph."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (NaN loss, NaN gradient)."""


class DataFormatError(ValueError):
    """Malformed on-disk artifact (PGM header, manifest line, binary record)."""


class ConfigError(ValueError):
    """Bad configuration file, unknown key, or type mismatch."""


class RejectedSample(RuntimeError):
    """Augmentation pushed too much of the mask out of frame; retriable."""
