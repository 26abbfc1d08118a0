"""Exception types raised across the package."""


class FSCILError(Exception):
    """Base class for all package errors."""


class InsufficientClasses(FSCILError, ValueError):
    pass


class InsufficientSamples(FSCILError, ValueError):
    pass


class IndexOutOfRange(FSCILError, IndexError):
    pass


class ShapeMismatch(FSCILError, ValueError):
    pass


class EmptyInput(FSCILError, ValueError):
    pass


class EmptyTrainSet(EmptyInput):
    pass


class ZeroNormVector(FSCILError, ValueError):
    """An embedding or weight row has zero norm; usually means the encoder collapsed."""


class NonFiniteLoss(FSCILError, RuntimeError):
    def __init__(self, stage, step, value, detail=""):
        self.stage = stage
        self.step = step
        self.value = value
        msg = f"non-finite loss {value!r} in {stage} at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownClass(FSCILError, KeyError):
    pass


class NonSquareInput(FSCILError, ValueError):
    pass


class RegistryMismatch(FSCILError, ValueError):
    pass


class LabelOutOfRegistry(FSCILError, ValueError):
    pass


class DuplicateClass(FSCILError, ValueError):
    pass


class ClassifierNotExpanded(FSCILError, RuntimeError):
    pass


class EmptyReports(FSCILError, ValueError):
    pass


class InvalidAxis(FSCILError, KeyError):
    pass


class InconsistentSessionCounts(FSCILError, ValueError):
    pass


class StageFailed(FSCILError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
