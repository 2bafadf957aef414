"""Exception hierarchy shared across the package."""


class KogError(Exception):
    """Base class for every validation error raised by kogt."""


class GraphStructureError(KogError, ValueError):
    """Skeleton is not a valid tree (disconnected, cyclic, bad indices)."""


class ConfigError(KogError, ValueError):
    pass


class ShapeError(KogError, ValueError):
    pass


class SchemaError(KogError, ValueError):
    """Dataset file content does not match the expected layout."""


class CheckpointError(KogError, ValueError):
    pass


class GradientContractError(KogError, RuntimeError):
    """Misuse of the differentiation engine (non-scalar loss, missing grad)."""
