"""Exception hierarchy shared by every ssvif module.

The CLI maps these onto process exit codes, so each class carries the code
it should produce.
"""


class SSVIFError(Exception):
    exit_code = 1


class DimensionError(SSVIFError, ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(SSVIFError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(SSVIFError, ValueError):
    exit_code = 2


class DataError(SSVIFError, IOError):
    """Unreadable, malformed or missing data files."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class CheckpointError(DataError):
    pass


class DivergenceError(SSVIFError, ArithmeticError):
    exit_code = 4
