"""Exception types shared across the pipeline.

Each carries the process exit code the CLI maps it to.
"""


class PanographError(Exception):
    exit_code = 1


class ConfigError(PanographError):
    exit_code = 1


class FormatError(PanographError):
    exit_code = 2


class DataError(PanographError):
    exit_code = 2


class ShapeError(PanographError, ValueError):
    exit_code = 2


class TrainingError(PanographError):
    exit_code = 3
