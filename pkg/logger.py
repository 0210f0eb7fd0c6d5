import json
import sys
from datetime import datetime, timezone
from typing import Any, Dict

from config import settings


LEVELS = {"debug": 10, "info": 20, "warning": 30, "error": 40}


def _default(value: Any) -> Any:
    # numpy scalars / arrays sneak into fields from the numeric code
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def log(level: str, event: str, **fields):
    if LEVELS.get(level, 20) < LEVELS.get(settings.log_level, 20):
        return
    ts = datetime.now(timezone.utc).isoformat()
    entry = {
        "ts": ts,
        "level": level,
        "event": event,
        **fields,
    }
    print(json.dumps(entry, default=_default), file=sys.stderr, flush=True)


def format_record(record: Dict[str, Any]) -> str:
    """
    Result records are the user-facing output of a command.
    No timestamps, sorted keys: identical inputs give byte-identical lines.
    """
    return json.dumps(record, sort_keys=True, default=_default)


def emit_record(record: Dict[str, Any]) -> None:
    print(format_record(record), flush=True)
