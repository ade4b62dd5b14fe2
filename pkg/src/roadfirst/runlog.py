"""JSON-lines run log shared by every pipeline stage."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

logger = logging.getLogger("roadfirst")


class RunLog:
    """Collects structured events; optionally appends them to a JSON-lines file.

    Every event is a flat dict with an ``event`` key. Events are also kept in
    memory (``self.events``) so tests and callers can inspect counts.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, event: str, **fields: Any) -> None:
        record = {"event": event, **fields}
        self.events.append(record)
        logger.debug("%s", record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")

    def of(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == event]


def _jsonable(obj: Any) -> Any:
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    return str(obj)


def emit(log: RunLog | None, event: str, **fields: Any) -> None:
    """Emit to ``log`` when given, else to the module logger only."""
    if log is None:
        logger.debug("%s %s", event, fields)
    else:
        log.emit(event, **fields)
