from .cli import main
from .config import ConfigError, config_hash, load, resolve

__all__ = ["ConfigError", "config_hash", "load", "main", "resolve"]
