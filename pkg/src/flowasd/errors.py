"""Exception hierarchy shared by every flowasd module."""


class FlowASDError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(FlowASDError, ValueError):
    pass


class NonFiniteGradient(FlowASDError, FloatingPointError):
    """Raised during backward when a gradient stops being finite."""

    def __init__(self, op, layer=None):
        self.op = op
        self.layer = layer
        where = f" in layer {layer!r}" if layer else ""
        super().__init__(f"non-finite gradient at op {op!r}{where}")


class NonFiniteActivation(FlowASDError, FloatingPointError):
    """Raised when a flow layer produces inf/nan on the forward or inverse path."""

    def __init__(self, layer_index, layer_name, direction="forward"):
        self.layer_index = layer_index
        self.layer_name = layer_name
        self.direction = direction
        super().__init__(
            f"non-finite activation in {direction} pass at layer {layer_index} ({layer_name})"
        )


# dsp-features
class FormatError(FlowASDError, ValueError):
    pass


class SampleRateError(FlowASDError, ValueError):
    pass


class TooShortError(FlowASDError, ValueError):
    pass


class DegenerateFilterError(FlowASDError, ValueError):
    pass


# losses / training
class EmptyBatchError(FlowASDError, ValueError):
    pass


class CalibrationFailed(FlowASDError, RuntimeError):
    pass


class CheckpointVersionError(FlowASDError, ValueError):
    pass


# evaluation
class SingleClassError(FlowASDError, ValueError):
    pass


# datagen / cli
class SpecError(FlowASDError, ValueError):
    pass


class ConfigError(FlowASDError, ValueError):
    pass
