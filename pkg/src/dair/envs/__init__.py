from .planar import TASKS, EnvConfig, Observation, PlanarEnv, SpawnError, WorldState, reset
from .trajectory import TrajectoryError, read_dump, write_dump

__all__ = [
    "TASKS",
    "EnvConfig",
    "Observation",
    "PlanarEnv",
    "SpawnError",
    "WorldState",
    "reset",
    "TrajectoryError",
    "read_dump",
    "write_dump",
]
