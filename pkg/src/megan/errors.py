"""Exception types shared across the package."""


class MeganError(Exception):
    pass


class ContractError(MeganError):
    """A caller violated a precondition (wrong arity, non-scalar loss, ...)."""


class DimensionError(ContractError):
    pass


class DegenerateBatchError(ContractError):
    pass


class NumericDomainError(MeganError, ArithmeticError):
    pass


class ConfigError(MeganError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class CheckpointError(MeganError):
    pass


class NonFiniteLossError(MeganError):
    def __init__(self, phase: str, iteration: int, value: float):
        super().__init__(f"non-finite {phase} loss ({value!r}) at iteration {iteration}")
        self.phase = phase
        self.iteration = iteration
        self.value = value
