"""
Structured Logging

One line per event on standard error: time, level, logger, event name and
key=value fields.
"""
import logging
import sys
from typing import Any, TextIO

_FIELDS_ATTR = "event_fields"


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        text = f"{value:.6g}"
    else:
        text = str(value)
    if not text or any(ch.isspace() for ch in text) or '"' in text:
        text = '"' + text.replace('"', '\\"') + '"'
    return text


class KeyValueFormatter(logging.Formatter):
    """Formats records as `<time> <LEVEL> <logger> <event> k=v ...`."""

    def format(self, record: logging.LogRecord) -> str:
        stamp = self.formatTime(record, "%Y-%m-%dT%H:%M:%S")
        parts = [stamp, record.levelname, record.name, record.getMessage()]
        fields = getattr(record, _FIELDS_ATTR, None) or {}
        parts.extend(f"{key}={_format_value(value)}" for key, value in fields.items())
        line = " ".join(parts)
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


def setup_logging(level: int = logging.INFO, stream: TextIO = None) -> logging.Handler:
    """
    Install the key=value formatter on the root logger.

    Args:
        level: Minimum level to emit
        stream: Destination stream (default: standard error)

    Returns:
        The installed handler
    """
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    root = logging.getLogger()
    for old in list(root.handlers):
        if getattr(old, "_glasshull", False):
            root.removeHandler(old)
    handler._glasshull = True
    root.addHandler(handler)
    root.setLevel(level)
    return handler


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields: Any):
    """Emit one structured event."""
    logger.log(level, event, extra={_FIELDS_ATTR: fields})
