"""Exception types shared across the package."""


class CstlabError(Exception):
    pass


class DimensionError(CstlabError, ValueError):
    pass


class DataError(CstlabError, ValueError):
    pass


class ConfigError(CstlabError, ValueError):
    pass


class UsageError(CstlabError, ValueError):
    pass


class ResourceError(CstlabError, RuntimeError):
    pass


class GenerationError(CstlabError, RuntimeError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
