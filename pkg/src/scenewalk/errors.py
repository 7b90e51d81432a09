"""Exception types shared across the package."""


class SceneWalkError(Exception):
    """Base class for all package errors."""


class DimensionError(SceneWalkError):
    """Shapes of two operands are incompatible."""


class VocabularyError(SceneWalkError):
    """An index or token falls outside a lookup table / vocabulary."""


class CapacityError(SceneWalkError):
    """A scene or matching exceeds the configured slot capacity."""


class ContractError(SceneWalkError):
    """An operation was called in a way that violates its contract."""


class ValidationError(SceneWalkError):
    """A symbolic object (scene, program, question) violates an invariant."""


class DataError(SceneWalkError):
    """A dataset record is missing a required supervision field."""


class OptimizerError(SceneWalkError):
    """A parameter update cannot proceed (e.g. non-finite gradient)."""


class CheckpointError(SceneWalkError):
    """A checkpoint cannot be read, or does not match the current world."""


class ReportError(SceneWalkError):
    """Prediction/reference sets cannot be aligned for scoring."""
