"""Utility helpers."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Iterable, Mapping, Sized

from .errors import DataError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def setup_logging(quiet: bool = False, json_logs: bool = False) -> logging.Logger:
    """Route package logs to stderr; stdout is reserved for results."""
    root = logging.getLogger("knowledge_tuning")
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter() if json_logs else logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.propagate = False
    return root


def log_counts(label: str, tables: Mapping[str, Sized], order: Iterable[str] | None = None) -> None:
    names = list(order) if order is not None else list(tables)
    logger.info("%s row counts: %s", label, ", ".join(f"{name}={len(tables[name])}" for name in names))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def prepare_output(path: Path) -> Path:
    """Create the parent directory of an output file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"Cannot create output directory '{path.parent}': {exc}") from exc
    return path
