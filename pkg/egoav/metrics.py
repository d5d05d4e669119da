"""
Local run metrics.

Events are captured as newline-delimited JSON records in a file owned by the
run, e.g. ``{"step": 12, "epoch": 0, "loss": 31.7, "lr": 2.4e-05,
"mask_mode": "token"}``. Records never carry wall-clock data, so rerunning a
command with the same resolved config and seed reproduces the file byte for
byte.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

from .logging import get_logger


logger = get_logger(__name__)


def _jsonable(value: Any) -> Any:
    if hasattr(value, "item"):  # numpy / torch scalars
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


class MetricsWriter:
    """
    Append-only JSONL sink for per-step training events.

    :param path: The metrics file, truncated on open unless ``append`` is set
    :type path: Union[str, Path]
    :param append: Keep existing records, used when resuming a run
    :type append: bool
    """

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "a" if append else "w", encoding="utf-8")
        self.count = 0

    def capture_event(self, properties: Dict[str, Any]) -> None:
        """
        Write one record.

        Args:
            properties (Dict[str, Any]): Flat mapping of JSON-compatible values.
        """
        record = {key: _jsonable(value) for key, value in properties.items()}
        self._handle.write(json.dumps(record) + "\n")
        self.count += 1

    def flush(self) -> None:
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()
            logger.debug(f"Wrote {self.count} metric records to {self.path}")

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Union[str, Path], event: Optional[str] = None) -> List[Dict]:
    """
    Read every record of a metrics file, optionally filtered by ``event``.
    """
    return [
        record
        for record in _iter_records(path)
        if event is None or record.get("event") == event
    ]


def _iter_records(path: Union[str, Path]) -> Iterator[Dict]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
