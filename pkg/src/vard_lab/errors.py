"""Exception types shared across the lab."""


class VardLabError(Exception):
    pass


class DimensionError(VardLabError, ValueError):
    pass


class ContractError(VardLabError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(VardLabError, FloatingPointError):
    pass


class ScheduleError(VardLabError, ValueError):
    pass


class SamplingError(VardLabError, RuntimeError):
    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class ScoringError(VardLabError, ValueError):
    pass


class DivergenceError(VardLabError, RuntimeError):
    def __init__(self, message, seed=None, step=None):
        super().__init__(f"{message} (seed={seed}, step={step})")
        self.seed = seed
        self.step = step


class BranchError(VardLabError, ValueError):
    """Rotation angle too close to pi for a principal-branch logarithm."""


class ConfigError(VardLabError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
