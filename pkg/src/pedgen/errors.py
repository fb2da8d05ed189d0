"""Exception types raised across the package."""


class PedGenError(Exception):
    """Base class for all package errors."""


class ShapeError(PedGenError, ValueError):
    pass


class NonFiniteError(PedGenError, FloatingPointError):
    pass


class DegenerateRotationError(PedGenError, ValueError):
    pass


class NotOrthonormalError(PedGenError, ValueError):
    pass


class DepthError(PedGenError, ValueError):
    """Raised for non-positive depth values or scale factors."""


class PathError(PedGenError, RuntimeError):
    """No collision-free path exists between start and goal."""


class SceneError(PedGenError, ValueError):
    pass


class FilterError(PedGenError, RuntimeError):
    """The anomaly filter rejected every record or was misused."""


class ConfigError(PedGenError, ValueError):
    pass


class CheckpointError(PedGenError, ValueError):
    pass


class LabelError(PedGenError, ValueError):
    pass
