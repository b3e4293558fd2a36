from __future__ import annotations

import json
import uuid
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Callable

from decision_trace.exporters.file import FileJsonlExporter
from decision_trace.tracer import decision

TENANT_ID = "fpt-perturb"
REQUIRED_FIELDS = (
    "decision_id",
    "timestamp",
    "actor",
    "decision_type",
    "context",
    "evidence",
    "outcome",
    "lineage",
)
TRACE_FILE = "decision_trace.jsonl"
SDK_TRACE_FILE = ".sdk_decision_trace.jsonl"

_DEFAULT_EMITTER: DecisionTraceEmitter | None = None


def set_default_emitter(emitter: DecisionTraceEmitter | None) -> None:
    """Set the process-wide default emitter used by trace_decision."""
    global _DEFAULT_EMITTER
    _DEFAULT_EMITTER = emitter


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


class DecisionTraceEmitter:
    """Appends analysis decisions to the run's trace file and the decision-trace SDK export.

    Decision ids are uuid5 of (config digest, command, decision type, sequence) so a
    rerun of the same config reproduces them.
    """

    def __init__(self, out_dir: Path, config_digest: str, command: str):
        self.config_digest = config_digest
        self.command = command
        self.output_path = out_dir / TRACE_FILE
        self.output_path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self.output_path.open("a", encoding="utf-8")
        self._sdk_exporter = FileJsonlExporter(str(out_dir / SDK_TRACE_FILE))
        self._seq = 0

    def __enter__(self) -> DecisionTraceEmitter:
        set_default_emitter(self)
        return self

    def __exit__(self, *exc: object) -> None:
        set_default_emitter(None)
        self.close()

    def close(self) -> None:
        self._file.close()

    def new_decision_id(self, decision_type: str) -> str:
        self._seq += 1
        name = f"{self.config_digest}:{self.command}:{decision_type}:{self._seq}"
        return str(uuid.uuid5(uuid.NAMESPACE_URL, name))

    def emit(self, event: dict[str, Any]) -> None:
        for field in REQUIRED_FIELDS:
            if field not in event:
                raise ValueError(f"Missing required field: {field}")

        parent = event["lineage"][0] if event["lineage"] else None
        with decision(
            tenant_id=TENANT_ID,
            environment="local",
            decision_type=event["decision_type"],
            actor={"id": event["actor"], "type": "analysis"},
            decision_id=event["decision_id"],
            parent_decision_id=parent,
            exporter=self._sdk_exporter,
            validate=False,
        ) as ctx:
            ctx.action(
                {
                    "context": event["context"],
                    "evidence": event["evidence"],
                    "outcome": event["outcome"],
                    "lineage": event["lineage"],
                }
            )

        self._file.write(json.dumps(event, sort_keys=True) + "\n")
        self._file.flush()


def trace_decision(actor: str) -> Callable[[Callable[..., dict[str, Any]]], Callable[..., dict[str, Any]]]:
    """Decorator for builders returning {decision_type, context, evidence, outcome, lineage}.

    The wrapper fills in decision_id, timestamp, actor and config_digest and emits the
    completed event through the default emitter.
    """

    def decorator(func: Callable[..., dict[str, Any]]) -> Callable[..., dict[str, Any]]:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> dict[str, Any]:
            event = func(*args, **kwargs)
            emitter = _DEFAULT_EMITTER
            if emitter is None:
                raise RuntimeError(
                    "Default decision emitter is not set. Call set_default_emitter(emitter) before traced decisions."
                )
            event.setdefault("lineage", [])
            event["decision_id"] = emitter.new_decision_id(event["decision_type"])
            event["timestamp"] = now_iso()
            event["actor"] = actor
            event["context"].setdefault("config_digest", emitter.config_digest)
            emitter.emit(event)
            return event

        return wrapper

    return decorator
