"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array extents do not satisfy an operation's shape contract."""


class ContractError(ValueError):
    """A precondition on values (not shapes) was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary/text layout."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason
