"""
common module
"""
import hashlib
import json
from functools import wraps
from typing import Any

import numpy as np
from dotenv import load_dotenv


def only_once(func):
    """Decorator to ensure a function is executed only once.

    On the first invokation, the function is executed normally.
    On subsequent calls, the cached result is returned.

    Args:
        func (Callable): The function to be decorated.

    Returns:
        Callable: The wrapped function with the only-once behavior.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        if not wrapper.runnable:
            wrapper.output = func(*args, **kwargs)
            wrapper.runnable = True
        return wrapper.output

    wrapper.runnable = False
    wrapper.output = None
    return wrapper


@only_once
def load_environment() -> bool:
    """
    Load a ``.env`` file from the working directory into ``os.environ``.

    Variables already set in the process environment win.

    Returns:
        bool: Whether a ``.env`` file was found.
    """
    return load_dotenv(override=False)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Derive an independent generator from a root seed and integer keys.

    The same ``(seed, *keys)`` always yields the same stream, and distinct key
    tuples yield statistically independent streams, which is what makes
    per-epoch and per-sample randomness independent of worker count.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def canonical_hash(payload: Any) -> str:
    """
    sha256 of the sorted, compact JSON encoding of ``payload``.
    """
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()
