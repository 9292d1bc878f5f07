"""Exception types shared across the package."""


class FedMACError(Exception):
    pass


class ContractError(FedMACError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    """A value fell outside an operation's mathematical domain (e.g. log of 0)."""


class NumericError(FedMACError, ArithmeticError):
    pass


class GraphReuseError(FedMACError, RuntimeError):
    pass


class DeterminismError(FedMACError, RuntimeError):
    pass


class StratificationError(ContractError):
    pass


class DataFormatError(FedMACError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(FedMACError, ValueError):
    """Invalid experiment configuration; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
