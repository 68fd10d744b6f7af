import json
import os
import sys
from datetime import datetime
from typing import Any, Optional, TextIO

from common.errors import ConfigError, IoError

_log_file: Optional[TextIO] = None
_cloud_logger: Any = None


def tlog_to(
    path: Optional[str] = None, cloud: bool = False, name: str = "mtbert"
) -> None:
    """Route structured records to `path` (NDJSON) and, optionally, to
    Google Cloud Logging under logger `name`."""
    global _log_file, _cloud_logger

    if _log_file:
        _log_file.close()
        _log_file = None
    if path:
        try:
            _log_file = open(path, "a", encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot open log {path}: {e}") from e

    _cloud_logger = None
    if cloud:
        try:
            import google.cloud.logging
        except ImportError as e:
            raise ConfigError("[ERROR] cloud logging needs google-cloud-logging installed") from e

        _cloud_logger = google.cloud.logging.Client().logger(name)


def tlog(msg: str, **fields: Any) -> None:
    now = datetime.now()
    print(f"[{os.getpid()}]{now}:{msg}", file=sys.stderr, flush=True)

    if not _log_file and not _cloud_logger:
        return

    record = {"ts": now.isoformat(), "pid": os.getpid(), "msg": msg}
    record.update(fields)
    if _log_file:
        _log_file.write(json.dumps(record, sort_keys=True, default=str) + "\n")
        _log_file.flush()
    if _cloud_logger:
        _cloud_logger.log_struct(json.loads(json.dumps(record, default=str)))
