"""Exception hierarchy. CLI exit codes are attached to each class."""


class FlowMatchError(Exception):
    exit_code = 1


class ConfigError(FlowMatchError, ValueError):
    """Invalid distribution, training or solver configuration."""

    exit_code = 4


class ContractError(FlowMatchError, ValueError):
    """Shapes or sizes violate an operation's preconditions."""


class DegenerateDataError(FlowMatchError, ValueError):
    pass


class NumericalError(FlowMatchError, ArithmeticError):
    """A non-finite value appeared; ``index`` locates it when known."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(FlowMatchError, RuntimeError):
    def __init__(self, message, violation=None, iterations=None):
        super().__init__(message)
        self.violation = violation
        self.iterations = iterations


class DivergenceError(NumericalError):
    """ODE state became non-finite."""


class StiffnessError(FlowMatchError, RuntimeError):
    """Adaptive step size underflowed."""


class UnderflowError(NumericalError):
    """Every Gibbs-kernel average underflowed; epsilon is too small."""


class IllConditionedReferenceError(FlowMatchError, ValueError):
    pass


class TrainingAborted(NumericalError):
    def __init__(self, message, step, last_checkpoint=None):
        super().__init__(message, index=step)
        self.step = step
        self.last_checkpoint = last_checkpoint


class UnknownBenchmarkError(ConfigError):
    exit_code = 3


class CheckpointError(FlowMatchError, ValueError):
    """Unreadable checkpoint or format-version mismatch."""

    exit_code = 5
