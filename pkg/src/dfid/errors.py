"""Exception hierarchy. The CLI maps these onto exit codes."""


class DfidError(Exception):
    pass


class ShapeError(DfidError, ValueError):
    """Input with the wrong dimension or an invalid argument."""


class ConfigError(DfidError, ValueError):
    pass


class NumericError(DfidError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class TrainingError(DfidError, RuntimeError):
    pass


class GenerationError(DfidError, RuntimeError):
    pass


class SplitError(DfidError, ValueError):
    pass


class MetricError(DfidError, ValueError):
    pass
