from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict

_RESERVED = set(logging.makeLogRecord({}).__dict__) | {"message", "asctime"}


class _JsonFormatter(logging.Formatter):
    def format(  # type: ignore[override]
        self,
        record: logging.LogRecord,
    ) -> str:
        payload: Dict[str, Any] = {
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key in _RESERVED or key.startswith("_"):
                continue
            payload[key] = value
        return json.dumps(
            payload,
            separators=(",", ":"),
            ensure_ascii=False,
            default=str,
        )


def _configure_root_logger() -> None:
    """
    Configure the root logger once for the toolkit.

    - Reads VVS_LOG_LEVEL (default INFO).
    - Uses a single StreamHandler to stderr so CSV/JSON on stdout stay clean.
    - Formats records as one JSON object per line.
    """
    root = logging.getLogger()
    if root.handlers:
        # Assume already configured by the hosting process (pytest, notebooks).
        return

    level_name = os.getenv("VVS_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    handler = logging.StreamHandler()
    handler.setFormatter(_JsonFormatter())
    root.setLevel(level)
    root.addHandler(handler)


def get_logger(name: str) -> logging.Logger:
    """
    Return a logger using the shared root configuration.

    Safe to call multiple times; configuration is idempotent.
    """
    _configure_root_logger()
    return logging.getLogger(name)


def log_structured(
    logger: logging.Logger,
    level: int,
    event: str,
    **fields: Any,
) -> None:
    """
    Log `event` with key/value fields attached as record attributes.

    Never raises; logging must not interfere with a numerical run.
    """
    if not logger.isEnabledFor(level):
        return

    safe_fields = {
        key: value for key, value in fields.items() if key not in _RESERVED
    }
    try:
        logger.log(level, event, extra={"event": event, **safe_fields})
    except Exception:  # noqa: BLE001
        return


# ---------------------------
# Run-specific logging helpers
# ---------------------------


def log_step_start(logger: logging.Logger, command: str, **fields: Any) -> None:
    log_structured(logger, logging.INFO, "step_start", command=command, **fields)


def log_step_end(
    logger: logging.Logger,
    command: str,
    status: str,
    **fields: Any,
) -> None:
    log_structured(
        logger,
        logging.INFO,
        "step_end",
        command=command,
        status=status,
        **fields,
    )


def log_numerical_issue(
    logger: logging.Logger,
    issue_type: str,
    severity: str,
    **details: Any,
) -> None:
    """Guard-band crossings, skipped samples, residual breaches."""
    level = logging.ERROR if severity == "error" else logging.WARNING
    log_structured(
        logger,
        level,
        "numerical_issue",
        issue_type=issue_type,
        severity=severity,
        **details,
    )
