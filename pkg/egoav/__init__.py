from .config import RunConfig, load_run_config
from .errors import ConfigError, DataError, EgoAVError, NonFiniteLossError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "EgoAVError",
    "NonFiniteLossError",
    "RunConfig",
    "load_run_config",
]
