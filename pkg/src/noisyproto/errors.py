"""Exception hierarchy shared by every module."""


class NoisyProtoError(Exception):
    """Base class for all library errors."""


class ShapeError(NoisyProtoError, ValueError):
    pass


class NumericError(NoisyProtoError, ArithmeticError):
    pass


class ParameterError(NoisyProtoError, ValueError):
    pass


class ConfigError(NoisyProtoError, ValueError):
    pass


class GraphError(NoisyProtoError, ValueError):
    pass


class ContractError(NoisyProtoError, ValueError):
    pass


class DegeneratePrototypeError(NoisyProtoError, ValueError):
    pass


class DegenerateLossError(NoisyProtoError, ValueError):
    pass


class FormatError(NoisyProtoError, ValueError):
    """Malformed feature container; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
