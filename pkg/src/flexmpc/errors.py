class FlexMpcError(Exception):
    """Base class for every error raised by the package."""


class SingularCovariance(FlexMpcError):
    pass


class NumericalError(FlexMpcError):
    pass


class SimulationDiverged(FlexMpcError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class NonConverged(FlexMpcError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConfigError(FlexMpcError):
    pass
