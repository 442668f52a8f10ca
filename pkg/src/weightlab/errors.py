"""Exception hierarchy shared by every weightlab module.

Errors split into two families so the CLI can map them onto exit codes:
``InputError`` subclasses describe bad files, flags or shapes (exit 2),
``EmptyResult`` covers selections that matched nothing (exit 3).
"""


class WeightLabError(Exception):
    """Base class for all weightlab errors."""


class InputError(WeightLabError):
    """The caller supplied something unusable."""


class EmptyResult(WeightLabError):
    """A selection or filter left nothing to work on."""


# tensor_io
class MalformedHeader(InputError):
    pass


class UnknownTensor(InputError):
    pass


class UnsupportedDType(InputError):
    def __init__(self, name, dtype):
        super().__init__(f"tensor {name!r} has unsupported dtype {dtype}")
        self.name = name
        self.dtype = dtype


class NonFiniteValue(InputError):
    pass


# moments
class EmptyAfterFilter(EmptyResult):
    pass


class EmptyInput(EmptyResult):
    pass


class DegenerateSample(InputError):
    pass


# shape_classify
class Inseparable(InputError):
    pass


# synth
class InvalidSpec(InputError):
    pass


# merge
class ShapeMismatch(InputError):
    pass


class MissingTensor(InputError):
    def __init__(self, name, model_index):
        super().__init__(f"tensor {name!r} missing from model #{model_index}")
        self.name = name
        self.model_index = model_index


class NonFloatTensor(InputError):
    pass


# noise_adapt
class DegenerateDesign(InputError):
    pass


class Diverged(WeightLabError):
    def __init__(self, step, loss):
        super().__init__(f"loss increased to {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class KeyMismatch(InputError):
    pass


class TooFewLayers(InputError):
    pass
