"""Exception hierarchy shared by every metashot module."""


class MetashotError(Exception):
    """Base class for all structured errors raised by the engine."""


class ShapeError(MetashotError):
    def __init__(self, node, message):
        self.node = node
        super().__init__(f"{node}: {message}")


class NonFiniteError(MetashotError):
    def __init__(self, node, context=None):
        self.node = node
        self.context = context
        msg = f"non-finite value produced at {node}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class GradientError(MetashotError):
    pass


class ConfigError(MetashotError):
    pass


class DatasetError(MetashotError):
    pass


class CheckpointError(MetashotError):
    pass


class StageError(MetashotError):
    """Raised when stages run out of order, e.g. RAML without a representation."""
