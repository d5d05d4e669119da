"""
errors module
"""


class EgoAVError(Exception):
    """
    Root of every error raised on purpose by egoav.
    """


class ConfigError(EgoAVError, ValueError):
    """
    Invalid or inconsistent configuration. The CLI exits with code 2.
    """


class DataError(EgoAVError, ValueError):
    """
    Input data violates a format contract (channels, sample rate, shapes).
    """


class NonFiniteLossError(EgoAVError, RuntimeError):
    """
    A training step produced a NaN or infinite loss.

    :param batch_ids: The clip ids of the offending batch
    :type batch_ids: list[str]
    """

    def __init__(self, message: str, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
