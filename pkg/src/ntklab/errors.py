"""Exception hierarchy. CLI maps these onto exit codes."""


class NtkLabError(Exception):
    pass


class DimensionError(NtkLabError, ValueError):
    pass


class SymmetryError(DimensionError):
    pass


class LayoutError(NtkLabError, ValueError):
    pass


class ConfigError(NtkLabError, ValueError):
    pass


class SamplingError(NtkLabError, ValueError):
    pass


class NumericalError(NtkLabError, ArithmeticError):
    pass


class DomainError(NtkLabError, ArithmeticError):
    """Math is well posed but the requested quantity is undefined (e.g. epsilon >= 1)."""


class ClassificationError(NtkLabError, ValueError):
    pass


class DivergenceError(NtkLabError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss={value!r})")
        self.step = step
        self.value = value
