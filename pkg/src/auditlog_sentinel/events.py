"""Audit-event ingestion: line parsing, path regularization, and windowing.

Input is a stream of endpoint audit events, one per line:

    timestamp_ms|process_id|action|target

The first three fields never contain pipes; literal ``|`` inside the target is
written as ``\\|``.  Each input file is one source stream; windowing anchors at
the first event timestamp of the source.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 240_000


class EventFormatError(ValueError):
    """A malformed event line, rule file, or window file."""


class ActionKind(enum.Enum):
    """Recorded audit actions. Read events are excluded by design."""

    FILE_WRITE = "FileWrite"
    FILE_DELETE = "FileDelete"
    EXECUTE = "Execute"
    PROCESS_SPAWN = "ProcessSpawn"
    REGISTRY_WRITE = "RegistryWrite"
    REGISTRY_DELETE = "RegistryDelete"


@dataclass(frozen=True, slots=True)
class NormalizedEvent:
    timestamp_ms: int
    process_id: int
    action: ActionKind
    target: str

    def __post_init__(self) -> None:
        if self.timestamp_ms < 0:
            raise ValueError("timestamp_ms must be >= 0")
        if self.process_id < 0:
            raise ValueError("process_id must be >= 0")


@dataclass(frozen=True, slots=True)
class RejectedLine:
    line_number: int
    reason: str


def escape_target(target: str) -> str:
    return target.replace("|", "\\|")


def unescape_target(field: str) -> str:
    return field.replace("\\|", "|")


def format_event_line(event: NormalizedEvent) -> str:
    return (
        f"{event.timestamp_ms}|{event.process_id}|"
        f"{event.action.value}|{escape_target(event.target)}"
    )


def parse_event_line(line: str) -> NormalizedEvent:
    """Parse one event line; raises EventFormatError naming the defect."""
    parts = line.split("|", 3)
    if len(parts) != 4:
        raise EventFormatError("expected 4 pipe-separated fields")
    ts_field, pid_field, action_field, target_field = parts
    try:
        timestamp_ms = int(ts_field)
    except ValueError:
        raise EventFormatError("timestamp is not an integer") from None
    if timestamp_ms < 0:
        raise EventFormatError("timestamp is negative")
    try:
        process_id = int(pid_field)
    except ValueError:
        raise EventFormatError("process id is not an integer") from None
    if process_id < 0:
        raise EventFormatError("process id is negative")
    try:
        action = ActionKind(action_field)
    except ValueError:
        raise EventFormatError(f"unknown action {action_field!r}") from None
    target = unescape_target(target_field)
    if not target:
        raise EventFormatError("empty target")
    return NormalizedEvent(timestamp_ms, process_id, action, target)


# ---------------------------------------------------------------------------
# Path regularization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RewriteRule:
    pattern: str
    replacement: str


# Collapse machine- and run-specific path fragments so the same behavior maps
# to the same target string across hosts.  Rule authors must keep the set
# idempotent: applying it twice must equal applying it once.
DEFAULT_RULES: tuple[RewriteRule, ...] = (
    RewriteRule(r"(?i)((?:^|\\)(?:users|documents and settings)\\)[^\\|]+", r"\g<1>[USER]"),
    RewriteRule(r"(?i)S-1-\d+(?:-\d+)+", "[SID]"),
    RewriteRule(
        r"(?i)\{[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}\}",
        "[GUID]",
    ),
    RewriteRule(r"(?i)(\\temp\\)[^\\|]+", r"\g<1>[TMP]"),
    RewriteRule(r"\b[0-9a-fA-F]{16,}\b", "[HEX]"),
)


class PathRegularizer:
    """Ordered regex rewrites applied to event targets, top to bottom."""

    def __init__(self, rules: Sequence[RewriteRule]) -> None:
        self.rules = tuple(rules)
        self._compiled: list[tuple[re.Pattern[str], str]] = []
        for i, rule in enumerate(self.rules):
            try:
                compiled = re.compile(rule.pattern)
            except re.error as exc:
                raise EventFormatError(f"rule {i + 1}: bad pattern: {exc}") from None
            self._compiled.append((compiled, rule.replacement))

    def apply(self, target: str) -> str:
        for pattern, replacement in self._compiled:
            target = pattern.sub(replacement, target)
        return target

    @classmethod
    def default(cls) -> "PathRegularizer":
        return cls(DEFAULT_RULES)

    @classmethod
    def from_file(cls, path: str | Path) -> "PathRegularizer":
        """Load ``pattern<TAB>replacement`` rules; blank and # lines skipped."""
        rules = []
        with open(path, encoding="utf-8") as fh:
            for n, raw in enumerate(fh, start=1):
                line = raw.rstrip("\r\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                if "\t" not in line:
                    raise EventFormatError(f"rules line {n}: expected pattern<TAB>replacement")
                pattern, replacement = line.split("\t", 1)
                rules.append(RewriteRule(pattern, replacement))
        return cls(rules)


def parse_event_stream(
    lines: Iterable[str],
    regularizer: PathRegularizer | None = None,
    strict: bool = False,
) -> tuple[list[NormalizedEvent], list[RejectedLine]]:
    """Parse an event-line stream, regularizing targets.

    Malformed lines are collected as rejects (1-based line numbers); blank
    lines are skipped.  With strict=True the first malformed line raises.
    """
    events: list[NormalizedEvent] = []
    rejects: list[RejectedLine] = []
    for n, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            event = parse_event_line(line)
        except EventFormatError as exc:
            if strict:
                raise EventFormatError(f"line {n}: {exc}") from None
            rejects.append(RejectedLine(n, str(exc)))
            continue
        if regularizer is not None:
            regularized = regularizer.apply(event.target)
            if regularized != event.target:
                event = NormalizedEvent(
                    event.timestamp_ms, event.process_id, event.action, regularized
                )
        events.append(event)
    return events, rejects


def write_rejects_report(rejects: Sequence[RejectedLine], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for reject in rejects:
            fh.write(f"{reject.line_number}\t{reject.reason}\n")


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


class WindowingMode(enum.Enum):
    FIXED = "fixed"
    SINGLE = "single"


@dataclass(frozen=True, slots=True)
class LogWindow:
    window_id: str
    source_id: str
    start_time: int
    duration: int
    events: tuple[NormalizedEvent, ...]

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        end = self.start_time + self.duration
        previous = None
        for event in self.events:
            if not self.start_time <= event.timestamp_ms < end:
                raise ValueError(
                    f"event at {event.timestamp_ms} outside window "
                    f"[{self.start_time}, {end})"
                )
            if previous is not None and event.timestamp_ms < previous:
                raise ValueError("window events must be time-ordered")
            previous = event.timestamp_ms


def window_stream(
    events: Sequence[NormalizedEvent],
    duration_ms: int = DEFAULT_WINDOW_MS,
    *,
    source_id: str,
    mode: WindowingMode = WindowingMode.FIXED,
) -> list[LogWindow]:
    """Split one source's events into disjoint windows.

    Windows anchor at the source's first event timestamp; each event lands in
    exactly one window by floor division.  Empty windows are not emitted, and
    window ids keep their slot number (``source:slot``) so they are stable
    under re-ingestion.  SINGLE mode emits one window covering the whole run.
    """
    if duration_ms <= 0:
        raise ValueError("duration_ms must be > 0")
    if not source_id:
        raise ValueError("source_id must be non-empty")
    if not events:
        return []
    ordered = sorted(events, key=lambda e: e.timestamp_ms)
    anchor = ordered[0].timestamp_ms
    if mode is WindowingMode.SINGLE:
        span = ordered[-1].timestamp_ms - anchor + 1
        return [
            LogWindow(
                window_id=f"{source_id}:0",
                source_id=source_id,
                start_time=anchor,
                duration=max(duration_ms, span),
                events=tuple(ordered),
            )
        ]
    windows: list[LogWindow] = []
    slot_events: list[NormalizedEvent] = []
    slot = 0
    for event in ordered:
        event_slot = (event.timestamp_ms - anchor) // duration_ms
        if slot_events and event_slot != slot:
            windows.append(
                LogWindow(
                    window_id=f"{source_id}:{slot}",
                    source_id=source_id,
                    start_time=anchor + slot * duration_ms,
                    duration=duration_ms,
                    events=tuple(slot_events),
                )
            )
            slot_events = []
        slot = event_slot
        slot_events.append(event)
    windows.append(
        LogWindow(
            window_id=f"{source_id}:{slot}",
            source_id=source_id,
            start_time=anchor + slot * duration_ms,
            duration=duration_ms,
            events=tuple(slot_events),
        )
    )
    return windows


def group_by_process(window: LogWindow) -> dict[int, list[NormalizedEvent]]:
    """Group window events by process id, ordered by first appearance."""
    groups: dict[int, list[NormalizedEvent]] = {}
    for event in window.events:
        groups.setdefault(event.process_id, []).append(event)
    return groups


# ---------------------------------------------------------------------------
# Ingested-window files (JSON lines, one window per line)
# ---------------------------------------------------------------------------

ENVIRONMENT_SANDBOX = "sandbox"
ENVIRONMENT_ENTERPRISE = "enterprise"
ENVIRONMENT_SYNTHETIC = "synthetic"


@dataclass(frozen=True, slots=True)
class WindowRecord:
    """A log window plus the ingest-level provenance the labeler needs."""

    window: LogWindow
    environment: str
    source_tag: str

    def __post_init__(self) -> None:
        if not self.environment:
            raise ValueError("environment must be non-empty")
        if not self.source_tag:
            raise ValueError("source_tag must be non-empty")


def write_windows_jsonl(records: Iterable[WindowRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            window = record.window
            payload = {
                "window_id": window.window_id,
                "source_id": window.source_id,
                "environment": record.environment,
                "source_tag": record.source_tag,
                "start_time": window.start_time,
                "duration": window.duration,
                "events": [
                    [e.timestamp_ms, e.process_id, e.action.value, e.target]
                    for e in window.events
                ],
            }
            fh.write(json.dumps(payload, separators=(",", ":")) + "\n")


def read_windows_jsonl(path: str | Path) -> list[WindowRecord]:
    records: list[WindowRecord] = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                events = tuple(
                    NormalizedEvent(ts, pid, ActionKind(action), target)
                    for ts, pid, action, target in payload["events"]
                )
                window = LogWindow(
                    window_id=payload["window_id"],
                    source_id=payload["source_id"],
                    start_time=payload["start_time"],
                    duration=payload["duration"],
                    events=events,
                )
                records.append(
                    WindowRecord(
                        window=window,
                        environment=payload["environment"],
                        source_tag=payload["source_tag"],
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise EventFormatError(f"{path}: line {n}: {exc}") from None
    return records


def ingest_file(
    path: str | Path,
    regularizer: PathRegularizer | None,
    *,
    environment: str,
    source_tag: str,
    duration_ms: int = DEFAULT_WINDOW_MS,
    mode: WindowingMode = WindowingMode.FIXED,
    strict: bool = False,
) -> tuple[list[WindowRecord], list[RejectedLine]]:
    """Parse one source file (source id = file stem) into window records."""
    source_id = Path(path).stem
    with open(path, encoding="utf-8") as fh:
        events, rejects = parse_event_stream(fh, regularizer, strict=strict)
    windows = window_stream(events, duration_ms, source_id=source_id, mode=mode)
    records = [
        WindowRecord(window=w, environment=environment, source_tag=source_tag)
        for w in windows
    ]
    return records, rejects
