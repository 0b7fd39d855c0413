"""Exception hierarchy shared by all modules."""


class DecolearnError(Exception):
    """Base class for errors raised by this package."""


class GraphError(DecolearnError, ValueError):
    pass


class InvalidSizeError(GraphError):
    pass


class ConstructionError(GraphError):
    """A randomized graph builder ran out of retries or got bad parity."""


class StepSizeError(DecolearnError, ValueError):
    pass


class ConsensusError(DecolearnError):
    """Consensus did not reach the requested tolerance."""

    def __init__(self, message, last_error=None, index=None):
        super().__init__(message)
        self.last_error = last_error
        self.index = index


class NumericOverflowError(DecolearnError, ArithmeticError):
    pass


class InvalidScenarioError(DecolearnError, ValueError):
    pass


class GlassoError(DecolearnError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptyComponentError(DecolearnError):
    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class SingularPrecisionError(DecolearnError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class EMStallError(DecolearnError):
    """The penalized objective decreased by more than the allowed slack."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
