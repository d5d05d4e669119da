"""
A centralized logging system for egoav.

Every module asks for its logger through `get_logger(__name__)`, so all of
them hang off a single library root logger that owns one stderr handler and
does not propagate to the application's root logger. The default verbosity is
read from ``EGOAV_VERBOSITY`` (a level name or number) and can be changed at
runtime with the `set_verbosity*` helpers. Training runs additionally attach a
file handler to their run directory with `add_file_handler`.
"""

import logging
import os
import sys
import threading
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union


_library_name = __name__.split(".", maxsplit=1)[0]

DEFAULT_HANDLER = None
_DEFAULT_LOGGING_LEVEL = logging.WARNING
_FORMAT = "[%(levelname)s|%(filename)s:%(lineno)s] %(asctime)s >> %(message)s"

_semaphore = threading.Lock()


def _get_default_logging_level() -> int:
    """
    Resolve the default verbosity from ``EGOAV_VERBOSITY``.

    Unknown values fall back to WARNING.
    """
    env_level = os.environ.get("EGOAV_VERBOSITY")
    if not env_level:
        return _DEFAULT_LOGGING_LEVEL

    if env_level.isdigit():
        return int(env_level)

    level = logging.getLevelName(env_level.upper())
    return level if isinstance(level, int) else _DEFAULT_LOGGING_LEVEL


def _get_library_root_logger() -> logging.Logger:
    return logging.getLogger(_library_name)


def _set_library_root_logger() -> None:
    """
    Set up the root logger for the library, once.
    """
    global DEFAULT_HANDLER

    with _semaphore:
        if DEFAULT_HANDLER:
            return

        if sys.stderr is None:
            sys.stderr = open(os.devnull, "w", encoding="utf-8")

        DEFAULT_HANDLER = logging.StreamHandler()  # sys.stderr as stream
        DEFAULT_HANDLER.flush = sys.stderr.flush

        library_root_logger = _get_library_root_logger()
        library_root_logger.addHandler(DEFAULT_HANDLER)
        library_root_logger.setLevel(_get_default_logging_level())
        library_root_logger.propagate = False


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Get a logger with the specified name.

    Args:
        name (Optional[str]): The name of the logger.
        If None, the root logger for the library is returned.

    Returns:
        logging.Logger: The logger with the specified name.
    """
    _set_library_root_logger()
    return logging.getLogger(name or _library_name)


def get_verbosity() -> int:
    _set_library_root_logger()
    return _get_library_root_logger().getEffectiveLevel()


def set_verbosity(verbosity: int) -> None:
    """
    Set the verbosity level of the root logger for the library.

    Args:
        verbosity (int): The verbosity level to set.
    """
    _set_library_root_logger()
    _get_library_root_logger().setLevel(verbosity)


def set_verbosity_debug() -> None:
    set_verbosity(logging.DEBUG)


def set_verbosity_info() -> None:
    set_verbosity(logging.INFO)


def set_verbosity_warning() -> None:
    set_verbosity(logging.WARNING)


def set_handler(handler: logging.Handler) -> None:
    _set_library_root_logger()

    assert handler is not None

    _get_library_root_logger().addHandler(handler)


def unset_handler(handler: logging.Handler) -> None:
    _set_library_root_logger()

    assert handler is not None

    _get_library_root_logger().removeHandler(handler)


def add_file_handler(path: Union[str, Path]) -> logging.Handler:
    """
    Mirror library logs into a file, typically ``<run_dir>/run.log``.

    The handler uses the library formatting regardless of the stderr one.
    The caller owns the handler and should `unset_handler` it when the run ends.

    Args:
        path (Union[str, Path]): The log file, appended to if it exists.

    Returns:
        logging.Handler: The attached handler.
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)

    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(_FORMAT))

    set_handler(handler)
    return handler


def set_formatting() -> None:
    """
    Set formatting for all handlers bound to the root logger for the library.

    The formatting is set to: "[levelname|filename:lineno] time >> message"
    """
    formatter = logging.Formatter(_FORMAT)

    for handler in _get_library_root_logger().handlers:
        handler.setFormatter(formatter)


@lru_cache(None)
def warning_once(self, *args, **kwargs):
    """
    Emit a warning log with the same message only once.

    This function is added as a method to the logging.Logger class.
    """
    self.warning(*args, **kwargs)


logging.Logger.warning_once = warning_once
