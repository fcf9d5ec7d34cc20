class MapInferenceError(Exception):
    """Base class for every failure the pipeline reports to the operator."""

    exit_code = 1


class ConfigError(MapInferenceError):
    exit_code = 2


class MissingInputError(MapInferenceError):
    exit_code = 3


class ShapeMismatchError(MapInferenceError, ValueError):
    exit_code = 4


class NonFiniteError(MapInferenceError, ArithmeticError):
    exit_code = 5


class InvalidGraphError(MapInferenceError, ValueError):
    exit_code = 6


class GridSpecError(MapInferenceError, ValueError):
    exit_code = 6


class TrajectoryParseError(MapInferenceError, ValueError):
    exit_code = 7
