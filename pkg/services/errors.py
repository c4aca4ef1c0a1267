"""
Error types shared by the lab services.
The CLI turns them into exit codes, the routers into HTTP errors.
"""


class DpdLabError(Exception):
    exit_code = 1


class ConfigError(DpdLabError, ValueError):
    exit_code = 2


class PrerequisiteError(DpdLabError):
    exit_code = 3


class TrainingDivergenceError(DpdLabError):
    exit_code = 4


class DimensionError(DpdLabError, ValueError):
    pass


class RankDeficientError(DpdLabError, ValueError):
    pass


class CheckpointError(DpdLabError, ValueError):
    pass


class StateError(DpdLabError, ValueError):
    """Signal state unknown to a grid or model"""
