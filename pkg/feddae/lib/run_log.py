"""
Logging setup and the JSON-lines round report stream.

Library modules log through logging.getLogger(f"feddae.{__name__}"); only
the CLI calls configure_logging().
"""

import json
import logging
from pathlib import Path
from typing import Any

LOG_FORMAT = "%(asctime)s %(name)s - %(levelname)s - %(message)s"
ROOT_LOGGER_NAME = "feddae"


def configure_logging(level: str = "INFO", log_file: Path | None = None) -> logging.Logger:
    """Install stream (and optional file) handlers once; later calls only adjust level/file."""
    root = logging.getLogger(ROOT_LOGGER_NAME)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))

    formatter = logging.Formatter(LOG_FORMAT)
    has_stream = any(
        isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in root.handlers
    )
    if not has_stream:
        handler = logging.StreamHandler()
        handler.setFormatter(formatter)
        root.addHandler(handler)

    if log_file is not None:
        target = str(log_file.resolve())
        if not any(isinstance(h, logging.FileHandler) and h.baseFilename == target for h in root.handlers):
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(target, encoding="utf-8")
            file_handler.setFormatter(formatter)
            root.addHandler(file_handler)
    return root


def close_file_handlers() -> None:
    """Detach file handlers so a finished run releases its train.log."""
    root = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


class RoundReportWriter:
    """Appends one JSON object per line to rounds.jsonl."""

    def __init__(self, path: Path) -> None:
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        # Each run starts a fresh stream
        path.write_text("", encoding="utf-8")

    def append(self, record: dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_round_reports(path: Path) -> list[dict[str, Any]]:
    """Read rounds.jsonl back; blank lines are skipped."""
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
