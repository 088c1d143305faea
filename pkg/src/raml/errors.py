"""Exception hierarchy shared across the package."""


class RamlError(Exception):
    pass


class ShapeError(RamlError, ValueError):
    pass


class DimensionError(ShapeError):
    pass


class DomainError(RamlError, ValueError):
    pass


class GraphStateError(RamlError, RuntimeError):
    pass


class BoundsError(RamlError, ValueError):
    pass


class ConfigError(RamlError, ValueError):
    """Bad configuration value or unparsable config/meta file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MiningError(RamlError, ValueError):
    pass


class NumericError(RamlError, FloatingPointError):
    pass
